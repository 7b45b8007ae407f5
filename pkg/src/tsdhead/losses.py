"""Proposal labelling, detection losses and the progressive-constraint margins.

Class convention: foreground labels are 0..C-1; logit column 0 is background
and foreground class ``y`` lives in column ``y + 1``. Regression outputs are
class-specific, four per foreground class, expressed in the weighted delta
space ``DELTA_WEIGHTS * encode_deltas(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .geometry import DELTA_WEIGHTS, MAX_LOG_SCALE, encode_deltas, iou_matrix
from .heads import HeadOutput
from .tensor import Tensor

BACKGROUND = -1
FG_IOU_THRESHOLD = 0.5


@dataclass
class PcConfig:
    m_c: float = 0.2
    m_r: float = 0.2

    def __post_init__(self):
        if self.m_c < 0 or self.m_r < 0:
            raise ValueError("margins must be non-negative")


@dataclass
class LabeledProposals:
    """Per-proposal assignment: ``labels`` is BACKGROUND (-1) for negatives."""

    boxes: np.ndarray
    labels: np.ndarray
    matched_gt: np.ndarray  # [N, 4]; meaningful only where is_positive
    max_iou: np.ndarray

    @property
    def is_positive(self) -> np.ndarray:
        return self.labels != BACKGROUND

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, idx) -> "LabeledProposals":
        return LabeledProposals(self.boxes[idx], self.labels[idx], self.matched_gt[idx], self.max_iou[idx])

    @staticmethod
    def concat(parts: Sequence["LabeledProposals"]) -> "LabeledProposals":
        return LabeledProposals(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.matched_gt for p in parts]),
            np.concatenate([p.max_iou for p in parts]),
        )


def assign_labels(proposals, gt_boxes, gt_labels, threshold: float = FG_IOU_THRESHOLD) -> LabeledProposals:
    """Match each proposal to its max-IoU ground truth (lowest index on ties); positive iff IoU >= threshold."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    n = len(proposals)
    if len(gt_boxes) == 0:
        return LabeledProposals(proposals, np.full(n, BACKGROUND), np.zeros((n, 4)), np.zeros(n))
    ious = iou_matrix(proposals, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    labels = np.where(best_iou >= threshold, gt_labels[best], BACKGROUND)
    return LabeledProposals(proposals, labels, gt_boxes[best], best_iou)


def sample_proposals(
    labeled: LabeledProposals,
    rng: np.random.Generator,
    max_total: int = 128,
    positive_fraction: float = 0.25,
) -> LabeledProposals:
    """Random subset of at most ``max_total`` with at most ``positive_fraction`` positives."""
    pos = np.flatnonzero(labeled.is_positive)
    neg = np.flatnonzero(~labeled.is_positive)
    n_pos = min(len(pos), int(max_total * positive_fraction))
    n_neg = min(len(neg), max_total - n_pos)
    keep = np.concatenate([rng.permutation(pos)[:n_pos], rng.permutation(neg)[:n_neg]])
    return labeled.subset(np.sort(keep))


def regression_targets(labeled: LabeledProposals, reference_boxes: Optional[np.ndarray] = None) -> np.ndarray:
    """Weighted deltas from ``reference_boxes`` (default: the proposals) to the matched gts, positives only."""
    pos = labeled.is_positive
    ref = labeled.boxes if reference_boxes is None else reference_boxes
    return encode_deltas(ref[pos], labeled.matched_gt[pos]) * np.asarray(DELTA_WEIGHTS)


def select_class_deltas(deltas: Tensor, labels: np.ndarray, rows: np.ndarray) -> Tensor:
    """The 4-delta slice of class ``labels[i]`` for each row in ``rows``; returns [len(rows), 4]."""
    cols = 4 * np.asarray(labels)[:, None] + np.arange(4)[None, :]
    return T.getitem(deltas, (np.asarray(rows)[:, None], cols))


def cls_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; background maps to column 0."""
    return T.mean(T.softmax_cross_entropy(logits, np.asarray(labels) + 1))


def loc_loss(pred_deltas: Tensor, target_deltas) -> Tensor:
    """Smooth-L1 (transition at 1) summed over the 4 coordinates, averaged over rows.

    With zero rows the result is a constant 0.
    """
    if pred_deltas.shape[0] == 0:
        return Tensor(0.0)
    diff = pred_deltas - np.asarray(target_deltas, dtype=pred_deltas.dtype)
    return T.mean(T.sum_(T.smooth_l1(diff), axis=1))


def margin_cls(sibling_score_y, tsd_score_y, m_c: float) -> Tensor:
    """Mean of relu(sibling - tsd + m_c); gradients reach both score paths."""
    sib = T.as_tensor(sibling_score_y)
    tsd = T.as_tensor(tsd_score_y)
    if sib.size == 0:
        return Tensor(0.0)
    return T.mean(T.relu(sib - tsd + m_c))


def margin_loc(iou_sibling, iou_tsd, m_r: float, is_positive) -> Tensor:
    """Mean over positives of relu(iou_sibling - iou_tsd + m_r).

    Negative proposals are dropped before the graph is built, so they add
    exactly zero to the value and to every gradient.
    """
    sib = T.as_tensor(iou_sibling)
    tsd = T.as_tensor(iou_tsd)
    mask = np.broadcast_to(np.asarray(is_positive, dtype=bool), sib.shape)
    if not mask.any():
        return Tensor(0.0)
    if not mask.all():
        idx = np.flatnonzero(mask.reshape(-1))
        sib = T.take_rows(T.reshape(sib, (-1,)), idx)
        tsd = T.take_rows(T.reshape(tsd, (-1,)), idx)
    return T.mean(T.relu(sib - tsd + m_r))


def decode_weighted(reference_boxes: np.ndarray, deltas: Tensor) -> Tensor:
    """Differentiable decode of weighted deltas [N, 4] relative to constant boxes [N, 4]."""
    ref = np.asarray(reference_boxes, dtype=deltas.dtype)
    w = ref[:, 2:3] - ref[:, 0:1]
    h = ref[:, 3:4] - ref[:, 1:2]
    cx = ref[:, 0:1] + 0.5 * w
    cy = ref[:, 1:2] + 0.5 * h
    wx, wy, ww, wh = DELTA_WEIGHTS
    dx = deltas[:, 0:1] * (1.0 / wx)
    dy = deltas[:, 1:2] * (1.0 / wy)
    dw = T.minimum(deltas[:, 2:3] * (1.0 / ww), MAX_LOG_SCALE)
    dh = T.minimum(deltas[:, 3:4] * (1.0 / wh), MAX_LOG_SCALE)
    pcx = dx * w + cx
    pcy = dy * h + cy
    pw = T.exp(dw) * w
    ph = T.exp(dh) * h
    return T.concat([pcx - pw * 0.5, pcy - ph * 0.5, pcx + pw * 0.5, pcy + ph * 0.5], axis=1)


def box_iou_diff(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise IoU between predicted boxes (Tensor [N, 4]) and constant gts [N, 4]."""
    gt = np.asarray(gt, dtype=pred.dtype)
    ix1 = T.maximum(pred[:, 0], gt[:, 0])
    iy1 = T.maximum(pred[:, 1], gt[:, 1])
    ix2 = T.minimum(pred[:, 2], gt[:, 2])
    iy2 = T.minimum(pred[:, 3], gt[:, 3])
    inter = T.relu(ix2 - ix1) * T.relu(iy2 - iy1)
    area_p = T.relu(pred[:, 2] - pred[:, 0]) * T.relu(pred[:, 3] - pred[:, 1])
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    return inter / (area_p + area_g - inter)


def positive_softmax_scores(logits: Tensor, labels: np.ndarray, rows: np.ndarray) -> Tensor:
    """Softmax probability of class ``labels[i]`` for each positive row."""
    probs = T.softmax(logits, axis=1)
    return T.getitem(probs, (np.asarray(rows), np.asarray(labels) + 1))


LOSS_KEYS = ("lcls", "lloc", "ldcls", "ldloc", "mcls", "mloc")


def total_loss(
    out: HeadOutput,
    labeled: LabeledProposals,
    pc: Optional[PcConfig] = None,
    use_sibling: bool = True,
    use_tsd: bool = True,
    tsd_reference: Optional[np.ndarray] = None,
):
    """Unit-weighted sum of the active terms; returns (loss, {term: float}).

    ``pc=None`` disables the margins. The TSD regressor's targets are encoded
    relative to the translated proposal P̂_r, which no gradient flows through.
    ``tsd_reference`` replaces that constant (finite-difference checks pin it
    at the unperturbed point so they measure the same function backward() does).
    """
    labels = labeled.labels
    pos = np.flatnonzero(labeled.is_positive)
    pos_labels = labels[pos]
    gts = labeled.matched_gt[pos]
    terms: Dict[str, Tensor] = {}
    sib_deltas_y = tsd_deltas_y = None
    p_hat_r = None

    if use_sibling:
        terms["lcls"] = cls_loss(out.sibling_logits, labels)
        sib_deltas_y = select_class_deltas(out.sibling_deltas, pos_labels, pos)
        terms["lloc"] = loc_loss(sib_deltas_y, regression_targets(labeled))
    if use_tsd:
        p_hat_r = out.p_hat_r.data if tsd_reference is None else tsd_reference
        p_hat_r = np.asarray(p_hat_r, dtype=np.float64)
        terms["ldcls"] = cls_loss(out.tsd_logits, labels)
        tsd_deltas_y = select_class_deltas(out.tsd_deltas, pos_labels, pos)
        terms["ldloc"] = loc_loss(tsd_deltas_y, regression_targets(labeled, p_hat_r))
    if pc is not None and use_sibling and use_tsd:
        if len(pos):
            sib_score = positive_softmax_scores(out.sibling_logits, pos_labels, pos)
            tsd_score = positive_softmax_scores(out.tsd_logits, pos_labels, pos)
            terms["mcls"] = margin_cls(sib_score, tsd_score, pc.m_c)
            iou_sib = box_iou_diff(decode_weighted(labeled.boxes[pos], sib_deltas_y), gts)
            iou_tsd = box_iou_diff(decode_weighted(p_hat_r[pos], tsd_deltas_y), gts)
            terms["mloc"] = margin_loc(iou_sib, iou_tsd, pc.m_r, np.ones(len(pos), dtype=bool))
        else:
            terms["mcls"] = Tensor(0.0)
            terms["mloc"] = Tensor(0.0)

    loss = None
    for value in terms.values():
        loss = value if loss is None else loss + value
    return loss, {k: float(v.data) for k, v in terms.items()}
