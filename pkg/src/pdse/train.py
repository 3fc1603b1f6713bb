"""Training loop, optimizer, checkpointing, evaluation, and the ablation harness."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import functional as F
from .anchors import assign_targets, concat_anchors, generate_anchors
from .data import (CTSlice, five_area_augment, hu_normalize, load_dataset, split_ids)
from .losses import focal_loss, smooth_l1_loss
from .metrics import EvalReport, evaluate_map
from .network import ModelConfig, PDSENet, flatten_outputs
from .nn import cast_input
from .postprocess import detections_to_array, postprocess
from .serialization import load_checkpoint, save_checkpoint
from .tensor import no_finite_checks


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; names the first bad gradient."""


@dataclass
class TrainConfig:
    """Everything a run needs; a fixed seed makes the run reproducible."""

    model: ModelConfig = field(default_factory=ModelConfig)
    dataset_dir: str = ""
    out_dir: str = ""
    image_size: int = 128
    epochs: int = 15
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    seed: int = 0
    augment: bool = False
    class_loss_weight: float = 1.0
    box_loss_weight: float = 1.0
    eval_every: int = 1
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 100
    map_iou: float = 0.5

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size % 128 != 0:
            raise ValueError("image_size must be divisible by 128")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunArtifacts:
    out_dir: str
    best_checkpoint: str
    last_checkpoint: str
    metrics_path: str
    best_val_map: float
    epochs_run: int


@dataclass
class Sample:
    image_id: str
    image: np.ndarray        # (1, H, W) float32 in [0, 1]
    boxes: np.ndarray        # (L, 4) float32
    classes: np.ndarray      # (L,) int64


class SGD:
    """Stochastic gradient descent with momentum and coupled weight decay."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        for (name, p), v in zip(self.named_params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None


def slice_to_sample(ct: CTSlice) -> Sample:
    boxes = np.asarray([ann.box for ann in ct.annotations], dtype=np.float32).reshape(-1, 4)
    classes = np.asarray([ann.class_id for ann in ct.annotations], dtype=np.int64)
    return Sample(ct.image_id, hu_normalize(ct).astype(np.float32), boxes, classes)


def _augmented_alternates(ct: CTSlice, out_size: int) -> list:
    alternates = []
    for img, anns in five_area_augment(ct, out_size=out_size):
        crop = CTSlice(image_id=ct.image_id, pixels=img, annotations=anns)
        alternates.append(slice_to_sample(crop))
    return alternates


class TargetCache:
    """Anchor assignment per sample, computed once and reused across epochs."""

    def __init__(self, anchors: np.ndarray):
        self.anchors = anchors
        self._store: dict = {}

    def get(self, key, sample: Sample):
        if key not in self._store:
            result = assign_targets(self.anchors, sample.boxes, sample.classes)
            self._store[key] = (result.labels, result.reg_targets)
        return self._store[key]


def _checkpoint_state(model: PDSENet) -> dict:
    return dict(model.state_dict())


def restore_model(checkpoint_path) -> tuple:
    """Rebuild a model (and its config echo) from a checkpoint file."""
    state, config, extra = load_checkpoint(checkpoint_path)
    model_cfg = ModelConfig.from_dict(config["model"])
    model = PDSENet(model_cfg, seed=0)
    model.load_state_dict(state)
    model.eval()
    return model, config, extra


def run_inference(model: PDSENet, images: np.ndarray, score_thresh: float = 0.05,
                  nms_iou: float = 0.5, max_dets: int = 100, batch_size: int = 8) -> list:
    """Detections for a stack of normalized images (N, 1, H, W)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    h, w = images.shape[2], images.shape[3]
    anchors = generate_anchors(model.config, (h, w))
    model.eval()
    out: list = []
    with no_finite_checks():
        for lo in range(0, images.shape[0], batch_size):
            outputs = model(images[lo:lo + batch_size])
            out.extend(postprocess(outputs, anchors, (h, w), score_thresh=score_thresh,
                                   nms_iou=nms_iou, max_dets=max_dets,
                                   num_classes=model.config.num_classes))
    return out


def evaluate_samples(model: PDSENet, samples: list, cfg: TrainConfig) -> tuple:
    """(EvalReport, detections_by_image) for a sample list."""
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, cfg.image_size, cfg.image_size))
    dets = run_inference(model, images, score_thresh=cfg.score_thresh,
                         nms_iou=cfg.nms_iou, max_dets=cfg.max_dets, batch_size=cfg.batch_size)
    detections = {s.image_id: detections_to_array(d) for s, d in zip(samples, dets)}
    annotations = {
        s.image_id: np.concatenate([s.boxes, s.classes[:, None].astype(np.float32)], axis=1)
        if len(s.classes) else np.zeros((0, 5))
        for s in samples
    }
    report = evaluate_map(detections, annotations, num_classes=cfg.model.num_classes, iou_thresh=cfg.map_iou)
    return report, detections


def _loss_on_batch(model: PDSENet, batch: list, targets: list, cfg: TrainConfig):
    images = np.stack([s.image for s in batch])
    labels = np.stack([t[0] for t in targets])           # (B, K)
    regs = np.stack([t[1] for t in targets])             # (B, K, 4)
    outputs = model(images)
    cls_flat, box_flat = flatten_outputs(outputs, cfg.model.num_classes, cfg.model.anchors_per_cell)
    cls_loss = focal_loss(cls_flat, labels, alpha=cfg.model.focal_alpha, gamma=cfg.model.focal_gamma)
    pos = np.flatnonzero(labels.reshape(-1) > 0)
    if pos.size:
        b, k, _ = box_flat.shape
        pred_pos = F.take_rows(box_flat.reshape(b * k, 4), pos)
        box_loss = smooth_l1_loss(pred_pos, regs.reshape(b * k, 4)[pos])
    else:
        box_loss = smooth_l1_loss(F.take_rows(box_flat.reshape(-1, 4), np.zeros(0, dtype=np.int64)),
                                  np.zeros((0, 4), dtype=np.float32))
    total = cls_loss * cfg.class_loss_weight + box_loss * cfg.box_loss_weight
    return total, float(cls_loss.data), float(box_loss.data)


def _abort_on_divergence(model: PDSENet, loss) -> None:
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError(f"non-finite loss; first non-finite parameter gradient: {name}")
    raise TrainingDivergedError("non-finite loss with finite parameter gradients")


def train_on_samples(
    model: PDSENet,
    train_samples: list,
    val_samples: list,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    augment_pools: list | None = None,
    log=None,
) -> dict:
    """Core loop shared by the CLI trainer and the estimator facade.

    Returns {"best_state", "best_val_map", "history", "last_state"}; when
    ``out_dir`` is given also writes metrics.jsonl and best/last checkpoints.
    """
    rng = np.random.default_rng(cfg.seed)
    anchors = concat_anchors(generate_anchors(cfg.model, cfg.image_size))
    cache = TargetCache(anchors)
    opt = SGD(model.named_parameters(), lr=cfg.learning_rate,
              momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    metrics_fh = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a")

    config_echo = {"model": cfg.model.to_dict(), "train": cfg.to_dict()}
    history = []
    best_val = -1.0
    best_state = None
    lr = cfg.learning_rate
    try:
        for epoch in range(1, cfg.epochs + 1):
            if epoch in cfg.lr_decay_epochs:
                lr *= cfg.lr_decay_factor
            opt.lr = lr
            model.train()
            order = rng.permutation(len(train_samples))
            epoch_cls, epoch_box, steps = 0.0, 0.0, 0
            t0 = time.time()
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch, targets = [], []
                for i in idx:
                    choice = 0
                    pool = augment_pools[i] if (cfg.augment and augment_pools) else None
                    if pool:
                        choice = int(rng.integers(0, len(pool) + 1))
                    sample = train_samples[i] if choice == 0 else pool[choice - 1]
                    batch.append(sample)
                    targets.append(cache.get((int(i), choice), sample))
                with no_finite_checks():
                    loss, cls_v, box_v = _loss_on_batch(model, batch, targets, cfg)
                    if not np.isfinite(loss.data):
                        _abort_on_divergence(model, loss)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                epoch_cls += cls_v
                epoch_box += box_v
                steps += 1

            entry = {
                "epoch": epoch,
                "lr": lr,
                "class_loss": epoch_cls / max(1, steps),
                "box_loss": epoch_box / max(1, steps),
                "seconds": round(time.time() - t0, 3),
            }
            if val_samples and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                report, _ = evaluate_samples(model, val_samples, cfg)
                entry["val_map"] = report.map_value
                if report.map_value > best_val:
                    best_val = report.map_value
                    best_state = {k: v.copy() for k, v in _checkpoint_state(model).items()}
                    if ckpt_dir is not None:
                        save_checkpoint(ckpt_dir / "best.ckpt", best_state, config_echo,
                                        extra={"epoch": epoch, "val_map": best_val})
            history.append(entry)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                metrics_fh.flush()
            if log:
                log(entry)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    last_state = _checkpoint_state(model)
    if best_state is None:
        best_state = {k: v.copy() for k, v in last_state.items()}
        best_val = 0.0
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "last.ckpt", last_state, config_echo,
                        extra={"epoch": cfg.epochs, "val_map": best_val})
        if not (ckpt_dir / "best.ckpt").exists():
            save_checkpoint(ckpt_dir / "best.ckpt", best_state, config_echo,
                            extra={"epoch": cfg.epochs, "val_map": best_val})
    return {"best_state": best_state, "best_val_map": best_val,
            "history": history, "last_state": last_state}


def _dataset_samples(cfg: TrainConfig):
    slices, _, manifest = load_dataset(cfg.dataset_dir)
    if manifest["image_size"] != cfg.image_size:
        raise ValueError(f"dataset images are {manifest['image_size']} px, config expects {cfg.image_size}")
    splits = split_ids(manifest)
    by_split = {name: [slice_to_sample(slices[i]) for i in ids] for name, ids in splits.items()}
    return slices, splits, by_split


def train(cfg: TrainConfig) -> RunArtifacts:
    """Disk-based training entry: dataset manifest in, run artifacts out."""
    if not cfg.dataset_dir or not cfg.out_dir:
        raise ValueError("train config needs dataset_dir and out_dir")
    slices, splits, by_split = _dataset_samples(cfg)
    if not by_split["train"]:
        raise ValueError("dataset has no training split")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    augment_pools = None
    if cfg.augment:
        augment_pools = [_augmented_alternates(slices[s.image_id], cfg.image_size)
                         for s in by_split["train"]]

    model = PDSENet(cfg.model, seed=cfg.seed)
    result = train_on_samples(model, by_split["train"], by_split["val"], cfg,
                              out_dir=out_dir, augment_pools=augment_pools)
    return RunArtifacts(
        out_dir=str(out_dir),
        best_checkpoint=str(out_dir / "checkpoints" / "best.ckpt"),
        last_checkpoint=str(out_dir / "checkpoints" / "last.ckpt"),
        metrics_path=str(out_dir / "metrics.jsonl"),
        best_val_map=result["best_val_map"],
        epochs_run=len(result["history"]),
    )


def evaluate_checkpoint(checkpoint_path, split: str, dataset_dir: str | None = None,
                        out_dir: str | None = None) -> EvalReport:
    """Evaluate a checkpoint on one split; writes JSON + plain table when
    ``out_dir`` is given."""
    model, config, _ = restore_model(checkpoint_path)
    train_cfg = TrainConfig.from_dict(config["train"])
    if dataset_dir:
        train_cfg.dataset_dir = dataset_dir
    _, splits, by_split = _dataset_samples(train_cfg)
    if split not in by_split:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(by_split)}")
    if not by_split[split]:
        raise ValueError(f"split {split!r} is empty")
    report, detections = evaluate_samples(model, by_split[split], train_cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"eval_{split}.json").write_text(report.to_json())
        (out_dir / f"eval_{split}.txt").write_text(report.format_table() + "\n")
    return report


ABLATION_VARIANTS = (
    ("RetinaNet", {"use_panet": False, "use_dse": False}),
    ("RetinaNet-PA", {"use_panet": True, "use_dse": False}),
    ("Ours", {"use_panet": True, "use_dse": True}),
)


def ablation(cfg: TrainConfig) -> dict:
    """Train the three architecture variants under identical seeds/schedules
    and emit a side-by-side per-class AP table (plus per-variant artifacts)."""
    from dataclasses import replace
    from .metrics import CLASS_IDS, TABLE_ROW_LABELS, TABLE_ROW_ORDER

    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name, toggles in ABLATION_VARIANTS:
        variant_model = replace(cfg.model, **toggles)
        variant_dir = out_root / name.lower().replace(" ", "_")
        variant_cfg = replace(cfg, model=variant_model, out_dir=str(variant_dir))
        artifacts = train(variant_cfg)
        report = evaluate_checkpoint(artifacts.best_checkpoint, "test", out_dir=variant_dir)
        reports[name] = report

    names = [name for name, _ in ABLATION_VARIANTS]
    lines = [f"{'Lesion type':<16}" + "".join(f"{n:>14}" for n in names)]
    for row in TABLE_ROW_ORDER:
        cid = CLASS_IDS[row]
        cells = []
        for n in names:
            ap = reports[n].per_class_ap.get(cid)
            cells.append("   n/a" if ap is None else f"{ap:.4f}")
        label = TABLE_ROW_LABELS.get(row, row.capitalize())
        lines.append(f"{label:<16}" + "".join(f"{c:>14}" for c in cells))
    lines.append(f"{'mAP':<16}" + "".join(f"{reports[n].map_value:>14.4f}" for n in names))
    table = "\n".join(lines)
    (out_root / "ablation.txt").write_text(table + "\n")
    (out_root / "ablation.json").write_text(json.dumps(
        {n: {"mAP": reports[n].map_value,
             "per_class_ap": {str(k): v for k, v in reports[n].per_class_ap.items()}}
         for n in names}, indent=2, sort_keys=True))
    return {"reports": reports, "table": table}
