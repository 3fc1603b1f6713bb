"""Anchor generation, ground-truth assignment, and box delta coding.

Anchors are axis-aligned (x1, y1, x2, y2) boxes in input-pixel coordinates,
centered on cell centers ``stride * (i + 0.5)`` and deliberately not clipped
to the image. Assignment follows the one-stage convention: IoU >= 0.5 is
positive, < 0.4 is background, the band between is ignored, and each
ground-truth box's single best anchor is forced positive regardless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import LEVELS, LEVEL_STRIDES, ModelConfig
from .tensor import ShapeError

LOG_SCALE_CLAMP = float(np.log(1000.0 / 16.0))


def generate_anchors(config: ModelConfig, input_size: int | tuple) -> dict:
    """Anchor boxes per pyramid level for a square or (H, W) input.

    Per cell there are ``len(scales) * len(ratios)`` anchors; rows are ordered
    row-major over cells, then by (scale, ratio) within a cell, matching
    ``flatten_outputs``.
    """
    h, w = (input_size, input_size) if isinstance(input_size, int) else tuple(input_size)
    if h % 128 != 0 or w % 128 != 0:
        raise ShapeError(f"anchor grid: input size {h}x{w} must be divisible by 128")
    if not config.anchor_scales or not config.anchor_ratios:
        raise ValueError("anchor generation requires non-empty scale and ratio lists")

    shapes = []
    for scale in config.anchor_scales:
        for ratio in config.anchor_ratios:  # ratio = height / width, unit area at base size
            aw = scale / np.sqrt(ratio)
            ah = scale * np.sqrt(ratio)
            shapes.append((aw, ah))
    shapes = np.asarray(shapes, dtype=np.float64)

    out = {}
    for lvl, base in zip(LEVELS, config.anchor_base_sizes):
        stride = LEVEL_STRIDES[lvl]
        gh, gw = h // stride, w // stride
        cx = (np.arange(gw, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(gh, dtype=np.float64) + 0.5) * stride
        half_w = 0.5 * base * shapes[:, 0]
        half_h = 0.5 * base * shapes[:, 1]
        boxes = np.empty((gh, gw, len(shapes), 4), dtype=np.float64)
        boxes[..., 0] = cx[None, :, None] - half_w[None, None, :]
        boxes[..., 1] = cy[:, None, None] - half_h[None, None, :]
        boxes[..., 2] = cx[None, :, None] + half_w[None, None, :]
        boxes[..., 3] = cy[:, None, None] + half_h[None, None, :]
        out[lvl] = boxes.reshape(-1, 4).astype(np.float32)
    return out


def concat_anchors(anchors_by_level: dict) -> np.ndarray:
    return np.concatenate([anchors_by_level[lvl] for lvl in LEVELS if lvl in anchors_by_level], axis=0)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for disjoint or degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] < a[0] or a[3] < a[1] or b[2] < b[0] or b[3] < b[1]:
        raise ValueError("iou: boxes must satisfy x2 >= x1 and y2 >= y1")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (K,4) and (L,4) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


IGNORE = -1
BACKGROUND = 0


@dataclass
class AssignmentResult:
    """Per-anchor training targets.

    labels: 0 background, -1 ignore, 1..9 lesion class.
    matched_gt: index of the matched ground-truth box for positives, else -1.
    reg_targets: encoded deltas for positives (zeros elsewhere).
    """

    labels: np.ndarray
    matched_gt: np.ndarray
    reg_targets: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels > 0).sum())


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    pos_thresh: float = 0.5,
    neg_thresh: float = 0.4,
) -> AssignmentResult:
    """Label every anchor against the ground truth of one image.

    Ties on the per-anchor best ground truth resolve to the lowest GT index;
    forced best-match assignments are applied in ascending GT index, the last
    writer winning when two ground truths share a best anchor.
    """
    k = anchors.shape[0]
    labels = np.zeros(k, dtype=np.int64)
    matched = np.full(k, -1, dtype=np.int64)
    reg = np.zeros((k, 4), dtype=np.float32)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if gt_boxes.shape[0] == 0:
        return AssignmentResult(labels, matched, reg)

    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(k), best_gt]

    labels[(best_iou >= neg_thresh) & (best_iou < pos_thresh)] = IGNORE
    pos = best_iou >= pos_thresh
    labels[pos] = gt_classes[best_gt[pos]]
    matched[pos] = best_gt[pos]
    for g in range(gt_boxes.shape[0]):
        a = int(ious[:, g].argmax())
        labels[a] = gt_classes[g]
        matched[a] = g

    pos_idx = np.flatnonzero(labels > 0)
    if pos_idx.size:
        reg[pos_idx] = encode_boxes(anchors[pos_idx], gt_boxes[matched[pos_idx]])
    return AssignmentResult(labels, matched, reg)


def _centers(boxes: np.ndarray):
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Deltas t = ((cx-ca)/wa, (cy-ca)/ha, log(w/wa), log(h/ha))."""
    ax, ay, aw, ah = _centers(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode_boxes: anchors must have positive width and height")
    bx, by, bw, bh = _centers(boxes)
    t = np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=-1)
    return t.astype(np.float32)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, image_size: tuple | None = None) -> np.ndarray:
    """Invert ``encode_boxes``; log-scale deltas are clamped to
    log(1000/16) and, when ``image_size=(H, W)`` is given, boxes are clipped
    to the image bounds."""
    ax, ay, aw, ah = _centers(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("decode_boxes: anchors must have positive width and height")
    d = np.asarray(deltas, dtype=np.float64)
    dw = np.minimum(d[..., 2], LOG_SCALE_CLAMP)
    dh = np.minimum(d[..., 3], LOG_SCALE_CLAMP)
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        ih, iw = image_size
        boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0, iw)
        boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0, ih)
    return boxes.astype(np.float32)
