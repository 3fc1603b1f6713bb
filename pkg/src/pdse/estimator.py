"""Scikit-learn style estimator facade over the detector.

``LesionDetector`` follows the estimator protocol — constructor stores
hyperparameters verbatim, ``fit`` does the work, ``get_params`` /
``set_params`` expose the grid — so it composes with sklearn tooling
(``clone``, pipelines, searches) without importing sklearn here.
"""

from __future__ import annotations

import inspect

import numpy as np

from .network import ModelConfig, PDSENet
from .postprocess import detections_to_array
from .serialization import load_checkpoint, save_checkpoint
from .train import Sample, TrainConfig, evaluate_samples, run_inference, train_on_samples
from .validation import check_annotation_list, check_image_stack


class NotFittedError(RuntimeError):
    pass


class LesionDetector:
    """Trainable one-stage lesion detector with a fit/predict surface.

    X is a stack of single-channel CT slices — raw uint16 intensities or
    floats already normalized to [0, 1] — with sides divisible by 128.
    y is one (L, 5) array of [x1, y1, x2, y2, class_id] rows per image
    (class ids 1..9). ``predict`` returns one (M, 6) array of
    [x1, y1, x2, y2, score, class_id] rows per image and ``score`` the
    mAP@0.5 against reference annotations.

    Architecture defaults are desk scale; pass e.g. ``pyramid_width=64,
    backbone_blocks=(2, 2, 2, 2), head_depth=4`` to widen.
    """

    def __init__(self, image_size=128, use_panet=True, use_dse=True,
                 pyramid_width=32, backbone_width=8, backbone_blocks=(1, 1, 1, 1),
                 head_depth=2, se_ratio=8, focal_alpha=0.25, focal_gamma=2.0,
                 epochs=15, batch_size=8, learning_rate=0.01, momentum=0.9,
                 weight_decay=1e-4, lr_decay_epochs=(), seed=0, val_fraction=0.0,
                 score_thresh=0.05, nms_iou=0.5, max_dets=100, verbose=0):
        self.image_size = image_size
        self.use_panet = use_panet
        self.use_dse = use_dse
        self.pyramid_width = pyramid_width
        self.backbone_width = backbone_width
        self.backbone_blocks = backbone_blocks
        self.head_depth = head_depth
        self.se_ratio = se_ratio
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_epochs = lr_decay_epochs
        self.seed = seed
        self.val_fraction = val_fraction
        self.score_thresh = score_thresh
        self.nms_iou = nms_iou
        self.max_dets = max_dets
        self.verbose = verbose

    # -- sklearn estimator protocol -----------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "LesionDetector":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for LesionDetector")
            setattr(self, key, value)
        return self

    # -- configuration ---------------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            use_panet=self.use_panet, use_dse=self.use_dse,
            pyramid_width=self.pyramid_width, backbone_width=self.backbone_width,
            backbone_blocks=tuple(self.backbone_blocks), head_depth=self.head_depth,
            se_ratio=self.se_ratio, focal_alpha=self.focal_alpha, focal_gamma=self.focal_gamma,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            model=self._model_config(), image_size=self.image_size,
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, lr_decay_epochs=tuple(self.lr_decay_epochs),
            seed=self.seed, score_thresh=self.score_thresh, nms_iou=self.nms_iou,
            max_dets=self.max_dets,
        )

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this LesionDetector is not fitted; call fit first")

    # -- core API ---------------------------------------------------------------

    def fit(self, X, y) -> "LesionDetector":
        images = check_image_stack(X, self.image_size)
        annotations = check_annotation_list(y, images.shape[0])
        samples = [Sample(f"img_{i:05d}", images[i], boxes, classes)
                   for i, (boxes, classes) in enumerate(annotations)]

        cfg = self._train_config()
        rng = np.random.default_rng(self.seed)
        if self.val_fraction > 0 and len(samples) >= 4:
            order = rng.permutation(len(samples))
            n_val = max(1, int(round(self.val_fraction * len(samples))))
            val = [samples[i] for i in order[:n_val]]
            tr = [samples[i] for i in order[n_val:]]
        else:
            tr, val = samples, []

        self.config_ = cfg
        self.model_ = PDSENet(cfg.model, seed=self.seed)
        log = (lambda e: print(f"[LesionDetector] {e}")) if self.verbose else None
        result = train_on_samples(self.model_, tr, val, cfg, out_dir=None, log=log)
        if val:
            self.model_.load_state_dict(result["best_state"])
        self.model_.eval()
        self.history_ = result["history"]
        self.best_val_map_ = result["best_val_map"]
        self.classes_ = np.arange(1, cfg.model.num_classes + 1)
        return self

    def predict(self, X) -> list:
        self._check_fitted()
        images = check_image_stack(X, self.image_size)
        dets = run_inference(self.model_, images, score_thresh=self.score_thresh,
                             nms_iou=self.nms_iou, max_dets=self.max_dets,
                             batch_size=self.batch_size)
        return [detections_to_array(d) for d in dets]

    def predict_boxes(self, X) -> list:
        """Like predict, but returning DetectionBox objects."""
        self._check_fitted()
        images = check_image_stack(X, self.image_size)
        return run_inference(self.model_, images, score_thresh=self.score_thresh,
                             nms_iou=self.nms_iou, max_dets=self.max_dets,
                             batch_size=self.batch_size)

    def score(self, X, y) -> float:
        """mAP at IoU 0.5 of predictions on X against reference annotations y."""
        self._check_fitted()
        images = check_image_stack(X, self.image_size)
        annotations = check_annotation_list(y, images.shape[0])
        samples = [Sample(f"img_{i:05d}", images[i], boxes, classes)
                   for i, (boxes, classes) in enumerate(annotations)]
        report, _ = evaluate_samples(self.model_, samples, self.config_)
        return report.map_value

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        config = {"model": self.config_.model.to_dict(), "train": self.config_.to_dict(),
                  "estimator_params": {k: list(v) if isinstance(v, tuple) else v
                                       for k, v in self.get_params().items()}}
        save_checkpoint(path, dict(self.model_.state_dict()), config)

    @classmethod
    def load(cls, path) -> "LesionDetector":
        state, config, _ = load_checkpoint(path)
        params = config.get("estimator_params", {})
        est = cls(**params)
        est.config_ = TrainConfig.from_dict(config["train"])
        est.model_ = PDSENet(est.config_.model, seed=0)
        est.model_.load_state_dict(state)
        est.model_.eval()
        est.classes_ = np.arange(1, est.config_.model.num_classes + 1)
        return est
