"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the graph in
reverse topological order. Leaves flagged ``requires_grad`` accumulate into
``.grad``; intermediate gradients live only for the duration of one call, so
the same graph can be back-propagated twice (leaf gradients then double).
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_default_dtype = np.float64 if os.environ.get("TSDHEAD_FLOAT64") == "1" else np.float32
_grad_enabled = True


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- backward
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), backward)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ------------------------------------------------------------------ reductions
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------ structure
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (x,), backward)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """``x[rows]`` along axis 0; the backward uses a bincount scatter instead of np.add.at."""
    rows = np.asarray(rows, dtype=np.int64)
    n = x.shape[0]
    rest = x.shape[1:]

    def backward(g):
        flat = g.reshape(len(rows), -1)
        mat = sp.csr_matrix((np.ones(len(rows), dtype=g.dtype), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
        return (np.asarray(mat @ flat).reshape((n,) + rest).astype(x.dtype, copy=False),)

    return _node(x.data[rows], (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _node(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# ------------------------------------------------------------------- algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product. dL/da = g @ b.T, dL/db = a.T @ g."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


# ---------------------------------------------------------- softmax & losses
def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label].

    A 1-D ``logits`` with an integer label gives a scalar; 2-D ``logits`` [N, C]
    with N labels gives the N per-row losses. Max-subtraction keeps it stable.
    """
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if c < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, labels]

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        grad = p * np.asarray(g).reshape(-1, 1)
        return (grad.reshape(logits.shape),)

    return _node(losses.reshape(()) if single else losses, (logits,), backward)


def smooth_l1(diff: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 x^2 / beta for |x| < beta, else |x| - 0.5 beta."""
    d = diff.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).astype(diff.dtype)
    return _node(out, (diff,), lambda g: (g * np.where(small, d / beta, np.sign(d)),))


# ------------------------------------------------------ bilinear interpolation
def bilinear_gather(fmap: Tensor, batch_index, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample ``fmap`` [B, H, W, C] at N points, returning [N, C].

    Point ``n`` reads image ``batch_index[n]`` at column ``xs[n]``, row ``ys[n]``;
    integer coordinates hit stored values exactly. Each of the four corner reads
    outside the map contributes 0. Differentiable in the map and in both
    coordinate vectors.
    """
    xs, ys = as_tensor(xs), as_tensor(ys)
    if fmap.ndim != 4:
        raise ShapeError(f"fmap must be [B, H, W, C], got {fmap.shape}")
    B, H, W, C = fmap.shape
    x = xs.data.reshape(-1).astype(np.float64)
    y = ys.data.reshape(-1).astype(np.float64)
    n = len(x)
    bidx = np.broadcast_to(np.asarray(batch_index, dtype=np.int64), (n,))

    x0 = np.floor(x)
    y0 = np.floor(y)
    lx = x - x0
    ly = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    cols, weights, dwx, dwy = [], [], [], []
    for dy, dx, w, gx, gy in (
        (0, 0, (1 - lx) * (1 - ly), -(1 - ly), -(1 - lx)),
        (0, 1, lx * (1 - ly), (1 - ly), -lx),
        (1, 0, (1 - lx) * ly, -ly, (1 - lx)),
        (1, 1, lx * ly, ly, lx),
    ):
        cx, cy = x0 + dx, y0 + dy
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        cols.append(np.where(valid, (bidx * H + cy) * W + cx, 0))
        weights.append(np.where(valid, w, 0.0))
        dwx.append(np.where(valid, gx, 0.0))
        dwy.append(np.where(valid, gy, 0.0))

    # CSR built directly: row n holds its four corner entries (out-of-map ones weigh 0)
    indptr = np.arange(0, 4 * n + 1, 4)
    cols = np.stack(cols, axis=1).reshape(-1)
    shape = (n, B * H * W)
    dtype = fmap.dtype

    def sparse(vals):
        return sp.csr_matrix((np.stack(vals, axis=1).reshape(-1).astype(dtype), cols, indptr), shape=shape)

    w_mat = sparse(weights)
    flat = fmap.data.reshape(B * H * W, C)
    out = np.asarray(w_mat @ flat, dtype=dtype)

    def backward(g):
        g_map = np.asarray(w_mat.T @ g, dtype=dtype).reshape(fmap.shape) if fmap.requires_grad else None
        g_x = g_y = None
        if xs.requires_grad:
            g_x = (np.asarray(sparse(dwx) @ flat) * g).sum(axis=1).astype(xs.dtype).reshape(xs.shape)
        if ys.requires_grad:
            g_y = (np.asarray(sparse(dwy) @ flat) * g).sum(axis=1).astype(ys.dtype).reshape(ys.shape)
        return g_map, g_x, g_y

    return _node(out, (fmap, xs, ys), backward)


def bilinear_sample(fmap: Tensor, x, y) -> Tensor:
    """Sample a single [H, W, C] map at (x, y); returns [C]."""
    if fmap.ndim != 3:
        raise ShapeError(f"expected [H, W, C], got {fmap.shape}")
    xs = reshape(_lift(x, fmap), (1,))
    ys = reshape(_lift(y, fmap), (1,))
    out = bilinear_gather(reshape(fmap, (1,) + fmap.shape), 0, xs, ys)
    return reshape(out, (fmap.shape[2],))


# ----------------------------------------------------------------- convolution
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 1) -> Tensor:
    """NHWC convolution. ``weight`` is [kh, kw, C_in, C_out]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d input {x.shape} vs weight {weight.shape}")
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # win: [B, Ho, Wo, Cin, kh, kw] -> cols [B*Ho*Wo, kh*kw*Cin]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * Cin)
    wmat = weight.data.reshape(kh * kw * Cin, Cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Cout)

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, Cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, Cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, padding : padding + H, padding : padding + W]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return total ** 0.5
