"""Average precision over IoU criteria."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Detection, iou_matrix

FIG_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class EvalReport:
    thresholds: Tuple[float, ...]
    ap: Dict[float, Dict[int, Optional[float]]]  # None: class has no ground truth
    map: Dict[float, float]
    coco_map: float
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "map": {f"{t:.2f}": v for t, v in self.map.items()},
            "ap": {f"{t:.2f}": {str(c): v for c, v in per.items()} for t, per in self.ap.items()},
            "coco_map": self.coco_map,
            "num_classes": self.num_classes,
        }


def greedy_match(det_boxes, gt_boxes, iou_threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Match detections (already in rank order) one-to-one to gts.

    Each detection takes the highest-IoU still-unmatched gt with IoU >=
    threshold (lowest gt index on ties). Returns (tp flags, matched gt index or -1).
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    tp = np.zeros(len(det_boxes), dtype=bool)
    match = np.full(len(det_boxes), -1, dtype=np.int64)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp, match
    ious = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        cand = np.where(taken | (ious[i] < iou_threshold), -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            tp[i] = True
            match[i] = j
            taken[j] = True
    return tp, match


def average_precision(tp_sorted, num_gt: int) -> float:
    """Area under the all-points interpolated precision/recall curve."""
    tp = np.asarray(tp_sorted, dtype=np.float64)
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def rank_order(scores) -> np.ndarray:
    """Indices by score descending, then position ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def class_ap(
    detections: Sequence[Sequence[Detection]],
    gt_boxes: Sequence[np.ndarray],
    gt_labels: Sequence[np.ndarray],
    label: int,
    iou_threshold: float,
) -> Optional[float]:
    num_gt = sum(int(np.sum(np.asarray(l) == label)) for l in gt_labels)
    if num_gt == 0:
        return None
    scores, image_ids, boxes = [], [], []
    for i, dets in enumerate(detections):
        for d in dets:
            if d.label == label:
                scores.append(d.score)
                image_ids.append(i)
                boxes.append(tuple(d.box))
    if not scores:
        return 0.0
    order = rank_order(scores)
    image_ids = np.asarray(image_ids)[order]
    boxes = np.asarray(boxes, dtype=np.float64)[order]
    tp = np.zeros(len(order), dtype=bool)
    for i in np.unique(image_ids):
        rows = np.flatnonzero(image_ids == i)
        g = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)[np.asarray(gt_labels[i]) == label]
        tp[rows], _ = greedy_match(boxes[rows], g, iou_threshold)
    return average_precision(tp, num_gt)


def evaluate(
    detections: Sequence[Sequence[Detection]],
    gt_boxes: Sequence[np.ndarray],
    gt_labels: Sequence[np.ndarray],
    thresholds: Sequence[float] = FIG_THRESHOLDS,
    num_classes: Optional[int] = None,
) -> EvalReport:
    """Per-class AP and mAP at each IoU threshold, plus mAP averaged over 0.50:0.95."""
    if len(detections) != len(gt_boxes) or len(gt_boxes) != len(gt_labels):
        raise ValueError("detections and ground truths must cover the same scenes")
    if any(not 0 < t < 1 for t in thresholds):
        raise ValueError("IoU thresholds must lie in (0, 1)")
    if num_classes is None:
        seen = [int(l) for ls in gt_labels for l in np.asarray(ls).tolist()]
        seen += [d.label for dets in detections for d in dets]
        num_classes = max(seen) + 1 if seen else 0

    def maps_for(ts):
        per, means = {}, {}
        for t in ts:
            per[t] = {c: class_ap(detections, gt_boxes, gt_labels, c, t) for c in range(num_classes)}
            present = [v for v in per[t].values() if v is not None]
            means[t] = float(np.mean(present)) if present else 0.0
        return per, means

    thresholds = tuple(float(t) for t in thresholds)
    ap, mean_ap = maps_for(thresholds)
    _, coco = maps_for(COCO_THRESHOLDS)
    return EvalReport(thresholds, ap, mean_ap, float(np.mean(list(coco.values()))), num_classes)
