"""Sibling head and the task-aware spatially disentangled (TSD) head.

All boxes entering or leaving this module are in image pixels. Pooling is done
on a single stride-``stride`` feature map; the conversion to map coordinates
(``x / stride - 0.5``, so that map cell centers line up with the pixels they
summarize) happens here and nowhere else.

Layout of one forward pass over R proposals P:

    F       = roi_align(map, P)
    sibling : f(F) -> cls, reg
    shared  = relu(estimator_shared(F))
    ΔR      = γ · fr_rest(shared) · (w, h)             -> P̂_r = P + ΔR
    ΔC      = γ · fc_rest(shared) · (w, h)  [k, k, 2]
    F̂_c     = deformable_pool(map, P, ΔC)
    F̂_r     = roi_align(map, P̂_r)
    tsd     : cls(f_c(F̂_c)), reg(f_r(F̂_r))
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .roi_ops import POOL_SIZE, SAMPLES_PER_BIN, deformable_pool, roi_align, translate_proposal
from .tensor import Tensor

ESTIMATOR_WIDTH = 256


@dataclass
class HeadConfig:
    num_classes: int = 3
    feat_channels: int = 64
    pool_size: int = POOL_SIZE
    samples_per_bin: int = SAMPLES_PER_BIN
    hidden: int = 1024
    gamma: float = 0.1
    stride: int = 8

    @property
    def in_features(self) -> int:
        return self.pool_size * self.pool_size * self.feat_channels


class SiblingHead(nn.Module):
    """Shared extractor f followed by the classifier and the class-specific regressor."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        self.f = nn.MLP([cfg.in_features, cfg.hidden, cfg.hidden], rng, final_relu=True)
        self.cls = nn.Linear(cfg.hidden, cfg.num_classes + 1, rng, gain=0.1)
        self.reg = nn.Linear(cfg.hidden, 4 * cfg.num_classes, rng, gain=0.01)


class TSDBranches(nn.Module):
    """Proposal estimators F_r / F_c (first layer shared) and the two task extractors."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        k = cfg.pool_size
        self.estimator_shared = nn.Linear(cfg.in_features, ESTIMATOR_WIDTH, rng)
        self.fr_rest = nn.MLP([ESTIMATOR_WIDTH, ESTIMATOR_WIDTH, 2], rng, zero_last=True)
        self.fc_rest = nn.MLP([ESTIMATOR_WIDTH, ESTIMATOR_WIDTH, k * k * 2], rng, zero_last=True)
        self.f_c = nn.MLP([cfg.in_features, cfg.hidden, cfg.hidden], rng, final_relu=True)
        self.f_r = nn.MLP([cfg.in_features, cfg.hidden, cfg.hidden], rng, final_relu=True)
        self.cls = nn.Linear(cfg.hidden, cfg.num_classes + 1, rng, gain=0.1)
        self.reg = nn.Linear(cfg.hidden, 4 * cfg.num_classes, rng, gain=0.01)


class HeadParams(nn.Module):
    """Every learnable weight of the sibling head and the TSD head."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, with_sibling: bool = True, with_tsd: bool = True):
        self.cfg = cfg
        self.sibling = SiblingHead(cfg, rng) if with_sibling else None
        self.tsd = TSDBranches(cfg, rng) if with_tsd else None


@dataclass
class HeadOutput:
    sibling_logits: Optional[Tensor]
    sibling_deltas: Optional[Tensor]
    tsd_logits: Optional[Tensor] = None
    tsd_deltas: Optional[Tensor] = None
    p_hat_r: Optional[Tensor] = None
    delta_r: Optional[Tensor] = None
    delta_c: Optional[Tensor] = None


def to_feature_coords(boxes, stride: int):
    """Image-pixel boxes (array or Tensor) to feature-map coordinates."""
    return boxes * (1.0 / stride) - 0.5


def _box_wh(boxes: np.ndarray, dtype) -> np.ndarray:
    b = np.asarray(boxes)
    return np.stack([b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1).astype(dtype)


def pool(fmap: Tensor, boxes: np.ndarray, batch_index, cfg: HeadConfig) -> Tensor:
    """RoI feature F of each proposal, flattened to [R, k*k*C]."""
    feat_boxes = to_feature_coords(np.asarray(boxes, dtype=fmap.dtype), cfg.stride)
    F = roi_align(fmap, feat_boxes, cfg.pool_size, cfg.samples_per_bin, batch_index)
    return T.reshape(F, (F.shape[0], -1))


def estimate_delta_r(F: Tensor, params: HeadParams, boxes: np.ndarray, shared: Optional[Tensor] = None) -> Tensor:
    """ΔR = γ · F_r(F) · (w, h): one (dx, dy) in pixels per proposal, shape [R, 2]."""
    t = params.tsd
    if shared is None:
        shared = T.relu(t.estimator_shared(F))
    raw = t.fr_rest(shared)
    return raw * (params.cfg.gamma * _box_wh(boxes, raw.dtype))


def estimate_delta_c(F: Tensor, params: HeadParams, boxes: np.ndarray, shared: Optional[Tensor] = None) -> Tensor:
    """ΔC = γ · F_c(F) · (w, h): per-bin (dx, dy) in pixels, shape [R, k, k, 2]."""
    t = params.tsd
    k = params.cfg.pool_size
    if shared is None:
        shared = T.relu(t.estimator_shared(F))
    raw = T.reshape(t.fc_rest(shared), (F.shape[0], k, k, 2))
    wh = _box_wh(boxes, raw.dtype)[:, None, None, :]
    return raw * (params.cfg.gamma * wh)


def sibling_forward(F: Tensor, params: HeadParams):
    """Classical 2-fc head: returns (logits [R, C+1], deltas [R, 4C]) from one hidden feature."""
    s = params.sibling
    hidden = s.f(F)
    return s.cls(hidden), s.reg(hidden)


def tsd_forward(
    fmap: Tensor,
    boxes,
    params: HeadParams,
    batch_index=None,
    with_sibling: bool = True,
    with_tsd: bool = True,
) -> HeadOutput:
    """Run the sibling and/or TSD branches for R proposals (image pixels, [R, 4])."""
    cfg = params.cfg
    boxes = np.asarray(boxes, dtype=fmap.dtype).reshape(-1, 4)
    if batch_index is None:
        batch_index = np.zeros(len(boxes), dtype=np.int64)
    F = pool(fmap, boxes, batch_index, cfg)

    out = HeadOutput(None, None)
    if with_sibling and params.sibling is not None:
        out.sibling_logits, out.sibling_deltas = sibling_forward(F, params)
    if not with_tsd or params.tsd is None:
        return out

    t = params.tsd
    R, k = len(boxes), cfg.pool_size
    shared = T.relu(t.estimator_shared(F))
    delta_r = estimate_delta_r(F, params, boxes, shared)
    delta_c = estimate_delta_c(F, params, boxes, shared)

    p_hat_r = translate_proposal(boxes, delta_r)
    F_r = roi_align(fmap, to_feature_coords(p_hat_r, cfg.stride), k, cfg.samples_per_bin, batch_index)
    F_c = deformable_pool(
        fmap,
        to_feature_coords(boxes, cfg.stride),
        delta_c * (1.0 / cfg.stride),
        k,
        cfg.samples_per_bin,
        batch_index,
    )
    out.tsd_logits = t.cls(t.f_c(T.reshape(F_c, (R, -1))))
    out.tsd_deltas = t.reg(t.f_r(T.reshape(F_r, (R, -1))))
    out.p_hat_r = p_hat_r
    out.delta_r = delta_r
    out.delta_c = delta_c
    return out
