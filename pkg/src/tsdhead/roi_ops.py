"""Differentiable RoI feature extraction.

Boxes here are in feature-map coordinates: column ``x`` / row ``y`` of the
map sit at integer positions, so a box spanning [x1, x2] covers continuous
map space. Callers convert from image pixels once (see ``heads.to_feature_coords``).

Each of the k x k bins averages ``samples_per_bin``² bilinear reads placed at
regular sub-positions. ``deformable_pool`` shifts every read in bin (i, j) by
that bin's offset before sampling; with zero offsets it performs exactly the
same arithmetic as ``roi_align``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import DegenerateBoxError
from .tensor import ShapeError, Tensor

POOL_SIZE = 7
SAMPLES_PER_BIN = 2


def _as_fmap(fmap: Tensor) -> Tensor:
    if fmap.ndim == 3:
        return T.reshape(fmap, (1,) + fmap.shape)
    if fmap.ndim != 4:
        raise ShapeError(f"feature map must be [H, W, C] or [B, H, W, C], got {fmap.shape}")
    return fmap


def _as_box_tensor(boxes, dtype) -> Tensor:
    if isinstance(boxes, Tensor):
        out = boxes
    else:
        out = Tensor(np.asarray(boxes, dtype=dtype))
    if out.ndim == 1:
        out = T.reshape(out, (1, 4))
    if out.ndim != 2 or out.shape[1] != 4:
        raise ShapeError(f"boxes must be [R, 4], got {out.shape}")
    return out


def bin_fractions(k: int, samples_per_bin: int, dtype=np.float32) -> np.ndarray:
    """Relative positions of the k*s sample lines along one box side, in (0, 1)."""
    j = np.arange(k)[:, None]
    i = np.arange(samples_per_bin)[None, :]
    return ((j + (i + 0.5) / samples_per_bin) / k).reshape(-1).astype(dtype)


def _sample_coords(boxes: Tensor, k: int, s: int):
    """Sample coordinates as xs [R, 1, 1, k, s] and ys [R, k, s, 1, 1]."""
    R = boxes.shape[0]
    w = boxes.data[:, 2] - boxes.data[:, 0]
    h = boxes.data[:, 3] - boxes.data[:, 1]
    if np.any(w <= 0) or np.any(h <= 0):
        raise DegenerateBoxError("RoI with non-positive width or height")
    frac = bin_fractions(k, s, boxes.dtype)[None, :]
    x1, y1, x2, y2 = (boxes[:, i : i + 1] for i in range(4))
    xs = x1 + (x2 - x1) * frac
    ys = y1 + (y2 - y1) * frac
    return T.reshape(xs, (R, 1, 1, k, s)), T.reshape(ys, (R, k, s, 1, 1))


def _gather_bins(fmap: Tensor, xs: Tensor, ys: Tensor, batch_index, k: int, s: int) -> Tensor:
    R = xs.shape[0]
    full = (R, k, s, k, s)
    xs = T.broadcast_to(xs, full)
    ys = T.broadcast_to(ys, full)
    if batch_index is None:
        bidx = np.zeros(R * k * s * k * s, dtype=np.int64)
    else:
        bidx = np.repeat(np.asarray(batch_index, dtype=np.int64), k * s * k * s)
    vals = T.bilinear_gather(fmap, bidx, T.reshape(xs, (-1,)), T.reshape(ys, (-1,)))
    vals = T.reshape(vals, full + (fmap.shape[3],))
    return T.mean(vals, axis=(2, 4))


def roi_align(
    fmap: Tensor,
    boxes,
    k: int = POOL_SIZE,
    samples_per_bin: int = SAMPLES_PER_BIN,
    batch_index: Optional[np.ndarray] = None,
) -> Tensor:
    """Pool each box into a [k, k, C] grid; returns [R, k, k, C].

    ``boxes`` may be a Tensor, in which case gradients also flow into the box
    coordinates (this is how a learned translation of the box is trained).
    """
    if k < 1 or samples_per_bin < 1:
        raise ValueError("k and samples_per_bin must be >= 1")
    fmap = _as_fmap(fmap)
    boxes = _as_box_tensor(boxes, fmap.dtype)
    xs, ys = _sample_coords(boxes, k, samples_per_bin)
    return _gather_bins(fmap, xs, ys, batch_index, k, samples_per_bin)


def deformable_pool(
    fmap: Tensor,
    boxes,
    offsets: Tensor,
    k: int = POOL_SIZE,
    samples_per_bin: int = SAMPLES_PER_BIN,
    batch_index: Optional[np.ndarray] = None,
) -> Tensor:
    """RoIAlign whose bin (i, j) reads at its regular sample points shifted by ``offsets[r, i, j]``.

    ``offsets`` is [R, k, k, 2] (or [k, k, 2] for one box) holding (dx, dy) in
    feature-map units. Each bin is the plain mean of its shifted reads.
    """
    fmap = _as_fmap(fmap)
    boxes = _as_box_tensor(boxes, fmap.dtype)
    offsets = T.as_tensor(offsets)
    if offsets.ndim == 3:
        offsets = T.reshape(offsets, (1,) + offsets.shape)
    R = boxes.shape[0]
    if offsets.shape != (R, k, k, 2):
        raise ShapeError(f"offsets must be {(R, k, k, 2)}, got {offsets.shape}")
    xs, ys = _sample_coords(boxes, k, samples_per_bin)
    dx = T.reshape(offsets[..., 0], (R, k, 1, k, 1))
    dy = T.reshape(offsets[..., 1], (R, k, 1, k, 1))
    return _gather_bins(fmap, xs + dx, ys + dy, batch_index, k, samples_per_bin)


def translate_proposal(boxes, delta_r) -> Tensor:
    """Shift every box rigidly by its (dx, dy); width and height are preserved.

    ``delta_r`` is [R, 2] (or [2]); the result is differentiable in it.
    """
    delta_r = T.as_tensor(delta_r)
    boxes = _as_box_tensor(boxes, delta_r.dtype)
    if delta_r.ndim == 1:
        delta_r = T.reshape(delta_r, (1, 2))
    if delta_r.shape != (boxes.shape[0], 2):
        raise ShapeError(f"delta_r must be {(boxes.shape[0], 2)}, got {delta_r.shape}")
    return boxes + T.concat([delta_r, delta_r], axis=1)
