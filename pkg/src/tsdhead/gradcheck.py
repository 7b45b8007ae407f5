"""Central finite-difference verification of ``Tensor.backward``."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, eps: float) -> np.ndarray:
    """(f(θ+eps) - f(θ-eps)) / (2 eps), one coordinate of ``param`` at a time."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f().data)
        flat[i] = orig - eps
        lo = float(f().data)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return grad


def analytic_gradient(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list:
    for p in params:
        p.grad = None
    f().backward()
    return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: Optional[float] = None) -> float:
    """Max over coordinates of |a - n| / max(|a|, |n|, floor).

    ``floor`` defaults to 1e-3 of the largest gradient magnitude, so that
    coordinates whose true gradient is negligible are judged on that scale
    rather than against their own near-zero size.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    if floor is None:
        floor = 1e-3 * max(np.abs(a).max(), np.abs(n).max())
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(diff == 0, 0.0, diff / np.where(denom > 0, denom, 1.0))
    return float(err.max())


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    floor: Optional[float] = None,
) -> float:
    """Compare backward() against central differences for every coordinate of ``params``.

    ``f`` takes no arguments and must rebuild its graph from the current
    contents of ``params`` (which are perturbed in place and restored).
    Returns the max relative error over all parameters. Keep the evaluation
    point at least ``eps`` away from kinks (ReLU at 0, integer bilinear
    coordinates, the smooth-L1 transition).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    analytic = analytic_gradient(f, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numerical_gradient(f, p, eps), floor))
    for p in params:
        p.grad = None
    return worst
