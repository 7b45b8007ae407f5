"""Axis-aligned box arithmetic in continuous pixel coordinates (no +1 convention).

Functions accept a single ``Box`` or any array-like whose last axis is
(x1, y1, x2, y2).
"""

from __future__ import annotations

import math
from typing import List, NamedTuple, Sequence

import numpy as np


class DegenerateBoxError(ValueError):
    """A box with non-positive width or height where a positive area is required."""


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))


class Detection(NamedTuple):
    box: Box
    label: int
    score: float


# Faster R-CNN style scaling applied to regression targets inside the head.
DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
# exp() guard for decoded widths/heights.
MAX_LOG_SCALE = math.log(1000.0 / 16)


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1:] != (4,):
        raise ValueError(f"boxes need a trailing axis of 4, got shape {arr.shape}")
    return arr


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape [len(a), len(b)]."""
    a = as_boxes(a).reshape(-1, 4)
    b = as_boxes(b).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def encode_deltas(proposals, targets) -> np.ndarray:
    """(dx, dy, dw, dh) taking ``proposals`` onto ``targets``.

    dx = (tx - px) / pw, dy = (ty - py) / ph, dw = ln(tw / pw), dh = ln(th / ph),
    with (px, py), (tx, ty) the box centers.
    """
    p = as_boxes(proposals)
    t = as_boxes(targets)
    pw, ph = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    tw, th = t[..., 2] - t[..., 0], t[..., 3] - t[..., 1]
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise DegenerateBoxError("proposal with non-positive width or height")
    if np.any(tw <= 0) or np.any(th <= 0):
        raise DegenerateBoxError("target with non-positive width or height")
    px, py = p[..., 0] + 0.5 * pw, p[..., 1] + 0.5 * ph
    tx, ty = t[..., 0] + 0.5 * tw, t[..., 1] + 0.5 * th
    return np.stack([(tx - px) / pw, (ty - py) / ph, np.log(tw / pw), np.log(th / ph)], axis=-1)


def decode_deltas(proposals, deltas) -> np.ndarray:
    """Inverse of :func:`encode_deltas`."""
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64)
    pw, ph = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    px, py = p[..., 0] + 0.5 * pw, p[..., 1] + 0.5 * ph
    cx = px + d[..., 0] * pw
    cy = py + d[..., 1] * ph
    w = pw * np.exp(d[..., 2])
    h = ph * np.exp(d[..., 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def translate(boxes, dx, dy) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[..., 0] += dx
    b[..., 2] += dx
    b[..., 1] += dy
    b[..., 3] += dy
    return b


def clip_boxes(boxes, image_w: float, image_h: float) -> np.ndarray:
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    b = as_boxes(boxes).copy()
    b[..., 0::2] = np.clip(b[..., 0::2], 0, image_w)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, image_h)
    return b


def clip_box(b: Box, image_w: float, image_h: float) -> Box:
    return Box(*map(float, clip_boxes(b, image_w, image_h)))


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """Greedy class-wise suppression; output sorted by (score desc, input index asc)."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    labels = np.array([d.label for d in dets])
    keep = nms_indices(boxes, scores, labels, iou_threshold)
    return [dets[i] for i in keep]


def nms_indices(boxes, scores, labels, iou_threshold: float = 0.5) -> np.ndarray:
    """Array form of :func:`nms`, returning kept indices in output order."""
    boxes = as_boxes(boxes).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    # lexsort: last key is primary; stable on index
    order = np.lexsort((np.arange(len(scores)), -scores))
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        rest = rest[(~suppressed[rest]) & (labels[rest] == labels[i])]
        if len(rest):
            overlaps = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
            suppressed[rest[overlaps > iou_threshold]] = True
    return np.array(keep, dtype=np.int64)
