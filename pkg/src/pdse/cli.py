"""Command-line surface: phantom generation, training, evaluation, ablation,
detection, and the gradient-check suite.

Config files are JSON (schema documented in the README). Exit codes: 0 on
success, 1 on validation failure, 2 when a check suite reports failures.
The PDSE_THREADS environment variable caps BLAS parallelism; it is applied
before numpy loads when running through this entry point.
"""

import argparse
import json
import os
import sys

if "PDSE_THREADS" in os.environ and "numpy" not in sys.modules:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, os.environ["PDSE_THREADS"])

from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CHECK_FAILED = 2


class CliError(Exception):
    pass


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}")


def cmd_generate_phantoms(args) -> int:
    from .phantom import PhantomSpec, generate_phantoms

    payload = _load_json(args.spec)
    out_dir = payload.pop("out_dir", None) or args.out
    if not out_dir:
        raise CliError("phantom spec needs an out_dir (in the file or via --out)")
    try:
        spec = PhantomSpec.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid phantom spec: {exc}")
    manifest = generate_phantoms(spec, out_dir)
    print(f"wrote {len(manifest['images'])} phantom slices to {out_dir}")
    print(f"content hash {manifest['content_hash']}")
    return EXIT_OK


def _train_config(path):
    from .train import TrainConfig

    payload = _load_json(path)
    try:
        return TrainConfig.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train config: {exc}")


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args.config)
    artifacts = train(cfg)
    print(f"trained {artifacts.epochs_run} epochs; best val mAP {artifacts.best_val_map:.4f}")
    print(f"best checkpoint: {artifacts.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    out_dir = args.out or str(Path(args.checkpoint).resolve().parent.parent)
    try:
        report = evaluate_checkpoint(args.checkpoint, args.split,
                                     dataset_dir=args.data, out_dir=out_dir)
    except (ValueError, KeyError) as exc:
        raise CliError(str(exc))
    print(report.format_table())
    return EXIT_OK


def cmd_ablation(args) -> int:
    from .train import ablation

    cfg = _train_config(args.config)
    result = ablation(cfg)
    print(result["table"])
    return EXIT_OK


def cmd_detect(args) -> int:
    from .data import hu_normalize, load_slice, write_detections_csv
    from .train import restore_model, run_inference

    model, config, _ = restore_model(args.checkpoint)
    train_cfg = config["train"]
    images, ids = [], []
    for path in args.images:
        try:
            ct = load_slice(path)
        except (FileNotFoundError, ValueError) as exc:
            raise CliError(f"unreadable image {path}: {exc}")
        images.append(hu_normalize(ct).astype(np.float32))
        ids.append(ct.image_id)
    dets = run_inference(model, np.stack(images), score_thresh=args.score_thresh,
                         nms_iou=train_cfg.get("nms_iou", 0.5),
                         max_dets=train_cfg.get("max_dets", 100))
    by_image = dict(zip(ids, dets))
    write_detections_csv(args.out, by_image)
    total = sum(len(d) for d in dets)
    print(f"wrote {total} detections for {len(ids)} images to {args.out}")

    if args.overlay_dir:
        from .overlay import write_overlay

        overlay_dir = Path(args.overlay_dir)
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for path, image_id, det in zip(args.images, ids, dets):
            out_path = overlay_dir / f"{image_id}_overlay.png"
            write_overlay(load_slice(path), det, out_path)
        print(f"wrote {len(ids)} overlays to {overlay_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .grad_suite import run_gradient_suite

    results = run_gradient_suite(instances=args.instances, seed=args.seed,
                                 progress=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops passed "
          f"({args.instances} instances each, tol 1e-4, 64-bit)")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdse",
        description="One-stage CT lesion detector: train, evaluate, and verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantoms", help="write a synthetic phantom-lesion dataset")
    p.add_argument("--spec", required=True, help="JSON spec file (count, size, seed, ...)")
    p.add_argument("--out", help="output directory (overrides spec out_dir)")
    p.set_defaults(fn=cmd_generate_phantoms)

    p = sub.add_parser("train", help="train a detector from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=["train", "val", "test"])
    p.add_argument("--data", help="dataset directory (defaults to the checkpoint's config echo)")
    p.add_argument("--out", help="directory for the JSON/table report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablation", help="train baseline, +PA, and full variants")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_ablation)

    p = sub.add_parser("detect", help="run detection on image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--out", default="detections.csv")
    p.add_argument("--overlay-dir")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference suite over every op")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=20240)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
