"""Input validation helpers for the public estimator surface."""

from __future__ import annotations

import numpy as np

from .data import hu_normalize
from .network import LEVELS


def check_image_stack(X, image_size: int | None = None) -> np.ndarray:
    """Coerce images to (N, 1, H, W) float32 in [0, 1].

    Accepts a (N, H, W) or (N, 1, H, W) array, or a sequence of 2D images.
    uint16 inputs are treated as raw CT intensities and HU-normalized; float
    inputs must already lie in [0, 1].
    """
    if isinstance(X, np.ndarray) and X.ndim in (3, 4):
        stack = X if X.ndim == 4 else X[:, None]
    else:
        imgs = [np.asarray(x) for x in X]
        if not imgs:
            raise ValueError("empty image input")
        shapes = {i.shape for i in imgs}
        if len(shapes) != 1 or imgs[0].ndim != 2:
            raise ValueError(f"images must share one 2D shape, got {sorted(shapes)}")
        stack = np.stack(imgs)[:, None]
    if stack.shape[1] != 1:
        raise ValueError(f"images must be single-channel, got {stack.shape[1]} channels")
    if stack.dtype == np.uint16:
        stack = np.stack([hu_normalize(img[0]).astype(np.float32) for img in stack])
    else:
        stack = stack.astype(np.float32)
        if stack.size and (stack.min() < -1e-6 or stack.max() > 1 + 1e-6):
            raise ValueError("float images must be normalized to [0, 1] (or pass raw uint16)")
    h, w = stack.shape[2], stack.shape[3]
    if h % 128 or w % 128:
        raise ValueError(f"image size {h}x{w} must be divisible by 128")
    if image_size is not None and (h != image_size or w != image_size):
        raise ValueError(f"images are {h}x{w} but the estimator was configured for {image_size}")
    return np.ascontiguousarray(stack)


def check_annotation_list(y, n_images: int) -> list:
    """Coerce per-image annotations to [(boxes (L,4) f32, classes (L,) i64)].

    Each image's entry is an (L, 5) array-like of [x1, y1, x2, y2, class_id]
    rows or a list of objects with ``box`` and ``class_id`` attributes.
    """
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} annotation lists for {n_images} images")
    out = []
    for i, entry in enumerate(y):
        if entry is None:
            rows = np.zeros((0, 5))
        elif len(entry) and hasattr(entry[0], "box"):
            rows = np.asarray([[*a.box, a.class_id] for a in entry], dtype=np.float64)
        else:
            rows = np.asarray(entry, dtype=np.float64).reshape(-1, 5)
        boxes = rows[:, :4].astype(np.float32)
        classes = rows[:, 4].astype(np.int64)
        if rows.size:
            if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
                raise ValueError(f"image {i}: annotation boxes must have positive extent")
            if classes.min() < 1 or classes.max() > 9:
                raise ValueError(f"image {i}: class ids must be in 1..9")
        out.append((boxes, classes))
    return out


def check_pyramid(pyramid: dict) -> None:
    """Assert the feature-pyramid invariants: all configured levels present,
    one channel width, spatial extents halving (within rounding) per level."""
    present = [lvl for lvl in LEVELS if lvl in pyramid]
    if present != list(LEVELS):
        raise ValueError(f"pyramid must carry levels {LEVELS}, got {sorted(pyramid)}")
    widths = {pyramid[lvl].shape[1] for lvl in LEVELS}
    if len(widths) != 1:
        raise ValueError(f"pyramid levels disagree on channel width: {sorted(widths)}")
    for a, b in zip(LEVELS[:-1], LEVELS[1:]):
        for dim in (2, 3):
            upper = pyramid[a].shape[dim]
            lower = pyramid[b].shape[dim]
            if abs(upper - 2 * lower) > 1:
                raise ValueError(f"level {b} extent {lower} is not half of {a} extent {upper}")
