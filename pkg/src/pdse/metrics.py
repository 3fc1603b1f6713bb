"""Average precision and mean AP over the nine lesion types.

Matching is greedy per image per class: detections in descending score order
(index breaking ties) claim the unmatched ground-truth box of highest IoU at
or above the matching threshold. The AP integral uses the all-points
precision envelope. Classes with no ground truth have undefined AP and are
excluded from the mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .anchors import iou_matrix

LESION_TYPES = ("lung", "abdomen", "mediastinum", "liver", "pelvis",
                "soft tissue", "kidney", "bone", "other")
CLASS_IDS = {name: i + 1 for i, name in enumerate(LESION_TYPES)}
# Reporting row order for evaluation tables.
TABLE_ROW_ORDER = ("bone", "abdomen", "mediastinum", "liver", "lung",
                   "kidney", "soft tissue", "pelvis", "other")
TABLE_ROW_LABELS = {"soft tissue": "Tissue"}


def match_greedy(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray,
                 iou_thresh: float) -> np.ndarray:
    """True/false-positive flags for one image's detections of one class."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-det_scores, kind="stable")
    tp = np.zeros(det_boxes.shape[0], dtype=bool)
    if gt_boxes.shape[0] == 0:
        return tp
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    for i in order:
        row = ious[i].copy()
        row[taken] = -1.0
        g = int(row.argmax())
        if row[g] >= iou_thresh:
            tp[i] = True
            taken[g] = True
    return tp


def _ap_from_flags(scores: np.ndarray, tp: np.ndarray, num_gt: int):
    """All-points interpolated AP plus the raw precision/recall points."""
    order = np.argsort(-scores, kind="stable")
    tp = tp[order].astype(np.float64)
    fp = 1.0 - tp
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope: running max from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap), recall, precision


def average_precision(det_boxes, det_scores, gt_boxes, iou_thresh: float = 0.5) -> float:
    """AP for one class over a single collection of detections and truths."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        raise ValueError("average_precision: undefined with zero ground-truth boxes")
    if det_boxes.shape[0] == 0:
        return 0.0
    tp = match_greedy(det_boxes, det_scores, gt_boxes, iou_thresh)
    ap, _, _ = _ap_from_flags(det_scores, tp, gt_boxes.shape[0])
    return ap


@dataclass
class EvalReport:
    """Per-class AP (None where the class has no ground truth), their mean,
    and the underlying curve points and counts."""

    per_class_ap: dict
    map_value: float
    num_detections: dict = field(default_factory=dict)
    num_ground_truth: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    iou_thresh: float = 0.5

    def to_json(self) -> str:
        payload = {
            "mAP": self.map_value,
            "iou_thresh": self.iou_thresh,
            "per_class": {
                LESION_TYPES[cid - 1]: {
                    "class_id": cid,
                    "ap": self.per_class_ap.get(cid),
                    "detections": self.num_detections.get(cid, 0),
                    "ground_truth": self.num_ground_truth.get(cid, 0),
                }
                for cid in range(1, len(LESION_TYPES) + 1)
            },
            "curves": {
                str(cid): {"recall": r.tolist(), "precision": p.tolist()}
                for cid, (r, p) in self.curves.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"{'Lesion type':<16}{'AP':>10}"]
        for name in TABLE_ROW_ORDER:
            cid = CLASS_IDS[name]
            ap = self.per_class_ap.get(cid)
            shown = "   n/a" if ap is None else f"{ap:.4f}"
            lines.append(f"{TABLE_ROW_LABELS.get(name, name.capitalize()):<16}{shown:>10}")
        lines.append(f"{'mAP':<16}{self.map_value:>10.4f}")
        return "\n".join(lines)


def evaluate_map(detections_by_image: dict, annotations_by_image: dict,
                 num_classes: int = 9, iou_thresh: float = 0.5) -> EvalReport:
    """Dataset-level evaluation.

    ``detections_by_image``: image_id -> (M, 6) rows [x1,y1,x2,y2,score,class];
    ``annotations_by_image``: image_id -> (L, 5) rows [x1,y1,x2,y2,class].
    Detections for unknown image ids are an error; images with no detections
    may simply be absent.
    """
    unknown = set(detections_by_image) - set(annotations_by_image)
    if unknown:
        raise ValueError(f"evaluate_map: detections reference unknown image ids {sorted(unknown)[:5]}")

    per_class_ap: dict = {}
    curves: dict = {}
    num_dets: dict = {}
    num_gts: dict = {}
    image_ids = sorted(annotations_by_image)
    for cid in range(1, num_classes + 1):
        scores_all, tp_all = [], []
        total_gt = 0
        for img in image_ids:
            ann = np.asarray(annotations_by_image[img], dtype=np.float64).reshape(-1, 5)
            det = np.asarray(detections_by_image.get(img, np.zeros((0, 6))), dtype=np.float64).reshape(-1, 6)
            if det.size and (np.any(det[:, 5] < 1) or np.any(det[:, 5] > num_classes)):
                bad = det[(det[:, 5] < 1) | (det[:, 5] > num_classes), 5]
                raise ValueError(f"evaluate_map: unknown class id {bad[0]:.0f} in detections for image {img}")
            gt = ann[ann[:, 4] == cid, :4]
            d = det[det[:, 5] == cid]
            total_gt += gt.shape[0]
            if d.shape[0]:
                tp_all.append(match_greedy(d[:, :4], d[:, 4], gt, iou_thresh))
                scores_all.append(d[:, 4])
        num_gts[cid] = total_gt
        num_dets[cid] = int(sum(len(s) for s in scores_all))
        if total_gt == 0:
            per_class_ap[cid] = None
            continue
        if not scores_all:
            per_class_ap[cid] = 0.0
            curves[cid] = (np.zeros(0), np.zeros(0))
            continue
        scores = np.concatenate(scores_all)
        tp = np.concatenate(tp_all)
        ap, recall, precision = _ap_from_flags(scores, tp, total_gt)
        per_class_ap[cid] = ap
        curves[cid] = (recall, precision)

    defined = [ap for ap in per_class_ap.values() if ap is not None]
    map_value = float(np.mean(defined)) if defined else 0.0
    return EvalReport(per_class_ap=per_class_ap, map_value=map_value,
                      num_detections=num_dets, num_ground_truth=num_gts,
                      curves=curves, iou_thresh=iou_thresh)
