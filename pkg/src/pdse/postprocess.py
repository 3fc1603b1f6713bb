"""Head outputs to final detections: thresholding, top-k, decode, NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import decode_boxes, iou_matrix
from .network import HeadOutputs


@dataclass
class DetectionBox:
    """One detection: pixel box, confidence, lesion class (1..9)."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    class_id: int

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_row(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2, self.score, self.class_id], dtype=np.float64)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Visits candidates by descending score (ties broken by ascending index)
    and suppresses any box whose IoU with an already kept box exceeds
    ``iou_thresh``. Returns kept indices in visit order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: scores must be finite")
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)

    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        overlap = np.zeros_like(inter)
        np.divide(inter, union, out=overlap, where=union > 0)
        order = rest[overlap <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def postprocess(
    outputs: HeadOutputs,
    anchors_by_level: dict,
    image_size: tuple,
    score_thresh: float = 0.05,
    pre_nms_topk: int = 1000,
    nms_iou: float = 0.5,
    max_dets: int = 100,
    num_classes: int = 9,
) -> list:
    """Convert raw head maps for a batch into per-image detection lists.

    Per level: sigmoid scores over (anchor, class) pairs, score threshold,
    top-k, box decoding with clipping; then class-wise NMS across levels and
    a global cap of ``max_dets`` sorted by descending score.
    """
    levels = outputs.levels()
    batch = outputs.class_logits[levels[0]].shape[0]
    results = []
    for n in range(batch):
        cand_boxes, cand_scores, cand_classes = [], [], []
        for lvl in levels:
            logits = outputs.class_logits[lvl].data[n]
            deltas = outputs.box_deltas[lvl].data[n]
            anchors = anchors_by_level[lvl]
            _, h, w = logits.shape
            a = anchors.shape[0] // (h * w)
            if logits.shape[0] != a * num_classes:
                raise ValueError(
                    f"postprocess: level {lvl} has {logits.shape[0]} class channels, "
                    f"expected {a * num_classes} for {anchors.shape[0]} anchors"
                )
            cls = logits.reshape(a, num_classes, h, w).transpose(2, 3, 0, 1).reshape(-1, num_classes)
            box = deltas.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
            scores = 1.0 / (1.0 + np.exp(-cls.astype(np.float64)))

            flat = scores.reshape(-1)
            sel = np.flatnonzero(flat > score_thresh)
            if sel.size == 0:
                continue
            if sel.size > pre_nms_topk:
                top = np.argsort(-flat[sel], kind="stable")[:pre_nms_topk]
                sel = sel[top]
            anchor_idx = sel // num_classes
            class_idx = sel % num_classes
            decoded = decode_boxes(anchors[anchor_idx], box[anchor_idx], image_size=image_size)
            cand_boxes.append(decoded)
            cand_scores.append(flat[sel])
            cand_classes.append(class_idx + 1)

        dets = []
        if cand_boxes:
            boxes = np.concatenate(cand_boxes)
            scores = np.concatenate(cand_scores)
            classes = np.concatenate(cand_classes)
            wide = (boxes[:, 2] - boxes[:, 0] > 0) & (boxes[:, 3] - boxes[:, 1] > 0)
            boxes, scores, classes = boxes[wide], scores[wide], classes[wide]
            for cid in np.unique(classes):
                m = np.flatnonzero(classes == cid)
                kept = m[nms(boxes[m], scores[m], nms_iou)]
                for i in kept:
                    dets.append(DetectionBox(*boxes[i].tolist(), float(scores[i]), int(cid)))
            dets.sort(key=lambda d: -d.score)
            dets = dets[:max_dets]
        results.append(dets)
    return results


def detections_to_array(dets: list) -> np.ndarray:
    """(M, 6) array [x1, y1, x2, y2, score, class_id]."""
    if not dets:
        return np.zeros((0, 6), dtype=np.float64)
    return np.stack([d.as_row() for d in dets])


def array_to_detections(arr: np.ndarray) -> list:
    return [DetectionBox(float(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]))
            for r in np.asarray(arr).reshape(-1, 6)]
