"""Random smooth evaluation points for every differentiable operation.

Each case builder takes (rng, dtype) and returns (f, params) where f() rebuilds
a scalar loss from the current contents of params. Points are redrawn until
they sit well away from kinks: ReLU/hinge arguments near 0, bilinear sample
coordinates near an integer, smooth-L1 arguments near +-1 and IoU edge
crossings.

``max_gradient_error`` compares backward() against central differences. In
32-bit mode the analytic gradient comes from a float32 graph while the
differences are taken on the same point rebuilt in float64: float32 function
values are too coarse for a difference quotient to resolve small gradient
coordinates at the 1e-3 level, whatever the step size.
"""

from __future__ import annotations

import copy

import numpy as np

from tsdhead import tensor as T
from tsdhead.heads import HeadConfig, HeadParams, tsd_forward
from tsdhead.losses import BACKGROUND, LabeledProposals, PcConfig, box_iou_diff, decode_weighted, margin_cls, margin_loc, positive_softmax_scores, total_loss
from tsdhead.roi_ops import bin_fractions, deformable_pool, roi_align, translate_proposal
from tsdhead.gradcheck import analytic_gradient, numerical_gradient, relative_error
from tsdhead.tensor import Tensor, no_grad

# distance kept from any kink, relative to the perturbation size
CLEARANCE = 0.1


def leaf(x, dtype):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def away_from_integers(values, gap=CLEARANCE) -> bool:
    frac = np.asarray(values) - np.floor(values)
    return bool(np.all((frac > gap) & (frac < 1 - gap)))


def signed_away_from_zero(rng, shape, low=0.1, high=2.0):
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def sample_positions(box, k, s, offsets=None):
    frac = bin_fractions(k, s, np.float64)
    xs = box[0] + (box[2] - box[0]) * frac
    ys = box[1] + (box[3] - box[1]) * frac
    if offsets is None:
        return np.concatenate([xs, ys])
    # every (row bin, col bin) shifts its own samples
    pts = []
    for r in range(k):
        for c in range(k):
            dx, dy = offsets[r, c]
            pts.extend(box[0] + (box[2] - box[0]) * frac.reshape(k, s)[c] + dx)
            pts.extend(box[1] + (box[3] - box[1]) * frac.reshape(k, s)[r] + dy)
    return np.array(pts)


def random_box(rng, lo=0.3, hi=5.0, min_side=1.5):
    while True:
        x1, y1 = rng.uniform(lo - 1, hi - min_side, size=2)
        w, h = rng.uniform(min_side, hi - 1, size=2)
        yield np.array([x1, y1, x1 + w, y1 + h])


def case_matmul(rng, dtype):
    a, b = leaf(rng.normal(size=(3, 4)), dtype), leaf(rng.normal(size=(4, 2)), dtype)
    g = rng.normal(size=(3, 2)).astype(dtype)
    return lambda: T.sum_((a @ b) * g), [a, b]


def case_relu(rng, dtype):
    x = leaf(signed_away_from_zero(rng, (12,)), dtype)
    g = rng.normal(size=12).astype(dtype)
    return lambda: T.sum_(T.relu(x) * g), [x]


def case_softmax_ce(rng, dtype):
    logits = leaf(rng.normal(size=(4, 5)), dtype)
    labels = rng.integers(0, 5, size=4)
    return lambda: T.mean(T.softmax_cross_entropy(logits, labels)), [logits]


def case_bilinear_sample(rng, dtype):
    fmap = leaf(rng.normal(size=(4, 5, 2)), dtype)
    while True:
        xy = rng.uniform(-0.9, 4.9, size=2)
        if away_from_integers(xy):
            break
    x, y = leaf([xy[0]], dtype), leaf([xy[1]], dtype)
    g = rng.normal(size=2).astype(dtype)
    return lambda: T.sum_(T.bilinear_sample(fmap, x, y) * g), [fmap, x, y]


def case_roi_align(rng, dtype):
    fmap = leaf(rng.normal(size=(1, 6, 6, 2)), dtype)
    for box in random_box(rng):
        if away_from_integers(sample_positions(box, 2, 2)):
            break
    boxes = leaf(box[None], dtype)
    g = rng.normal(size=(1, 2, 2, 2)).astype(dtype)
    return lambda: T.sum_(roi_align(fmap, boxes, 2, 2) * g), [fmap, boxes]


def case_deformable_pool(rng, dtype):
    fmap = leaf(rng.normal(size=(1, 6, 6, 2)), dtype)
    for box in random_box(rng):
        off = rng.uniform(-0.6, 0.6, size=(2, 2, 2))
        if away_from_integers(sample_positions(box, 2, 2, off)):
            break
    offsets = leaf(off[None], dtype)
    g = rng.normal(size=(1, 2, 2, 2)).astype(dtype)
    return lambda: T.sum_(deformable_pool(fmap, box[None], offsets, 2, 2) * g), [fmap, offsets]


def case_translate_then_pool(rng, dtype):
    fmap = leaf(rng.normal(size=(1, 6, 6, 2)), dtype)
    for box in random_box(rng):
        dr = rng.uniform(-0.8, 0.8, size=2)
        if away_from_integers(sample_positions(box + np.r_[dr, dr], 2, 2)):
            break
    delta = leaf(dr[None], dtype)
    g = rng.normal(size=(1, 2, 2, 2)).astype(dtype)
    return lambda: T.sum_(roi_align(fmap, translate_proposal(box[None], delta), 2, 2) * g), [fmap, delta]


def case_smooth_l1(rng, dtype):
    mag = np.where(rng.random(10) < 0.5, rng.uniform(0.05, 0.9, 10), rng.uniform(1.1, 3.0, 10))
    x = leaf(mag * rng.choice([-1.0, 1.0], size=10), dtype)
    g = rng.normal(size=10).astype(dtype)
    return lambda: T.sum_(T.smooth_l1(x) * g), [x]


def case_margin_cls(rng, dtype):
    labels = rng.integers(0, 2, size=4)
    rows = np.arange(4)
    while True:
        sib, tsd = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        with T.default_dtype(np.float64):
            s = positive_softmax_scores(Tensor(sib), labels, rows).data
            t = positive_softmax_scores(Tensor(tsd), labels, rows).data
        arg = s - t + 0.2
        if np.all(np.abs(arg) > 0.05) and np.any(arg > 0):
            break
    a, b = leaf(sib, dtype), leaf(tsd, dtype)
    return lambda: margin_cls(positive_softmax_scores(a, labels, rows), positive_softmax_scores(b, labels, rows), 0.2), [a, b]


def _edges_clear(pred, gt, gap):
    return np.all(np.abs(pred[:, [0, 2]][:, :, None] - gt[:, [0, 2]][:, None, :]) > gap) and np.all(
        np.abs(pred[:, [1, 3]][:, :, None] - gt[:, [1, 3]][:, None, :]) > gap
    )


def case_margin_loc(rng, dtype):
    ref = np.array([[10.0, 10.0, 30.0, 26.0], [40.0, 12.0, 60.0, 40.0], [5.0, 50.0, 25.0, 70.0]])
    gt = ref + rng.uniform(-3, 3, size=ref.shape)
    while True:
        ds, dt = rng.normal(scale=0.8, size=(3, 4)), rng.normal(scale=0.8, size=(3, 4))
        with T.default_dtype(np.float64):
            ps, pt = decode_weighted(ref, Tensor(ds)), decode_weighted(ref, Tensor(dt))
            arg = box_iou_diff(ps, gt).data - box_iou_diff(pt, gt).data + 0.2
        if _edges_clear(ps.data, gt, 0.5) and _edges_clear(pt.data, gt, 0.5) and np.all(np.abs(arg) > 0.05) and np.any(arg > 0):
            break
    a, b = leaf(ds, dtype), leaf(dt, dtype)
    positive = np.array([True, True, False])
    return lambda: margin_loc(box_iou_diff(decode_weighted(ref, a), gt), box_iou_diff(decode_weighted(ref, b), gt), 0.2, positive), [a, b]


TOY_CFG = HeadConfig(num_classes=2, feat_channels=2, pool_size=2, hidden=4, gamma=0.1, stride=8)


def case_full_objective(rng, dtype):
    """Every loss term through both heads on a 2-class, 3-proposal batch."""
    with T.default_dtype(dtype):
        params = HeadParams(TOY_CFG, rng)
        # zero biases put dead-input units exactly on the ReLU kink
        for name, p in params.named_parameters():
            if name.endswith("bias"):
                p.data[...] = rng.normal(scale=0.3, size=p.shape)
        for layer in (params.tsd.fr_rest.layers[-1], params.tsd.fc_rest.layers[-1]):
            layer.weight.data[...] = rng.normal(scale=0.05, size=layer.weight.shape)
    fmap = leaf(rng.normal(size=(1, 6, 6, 2)), dtype)
    boxes = np.array([[7.3, 9.1, 30.6, 35.2], [17.7, 5.4, 42.3, 33.9], [2.9, 20.3, 21.1, 44.6]])
    gts = np.array([[9.0, 8.0, 32.0, 37.0], [16.0, 8.0, 40.0, 30.0], [0.0, 0.0, 1.0, 1.0]])
    labeled = LabeledProposals(boxes, np.array([1, 0, BACKGROUND]), gts, np.array([0.8, 0.85, 0.0]))
    checked = [
        fmap,
        params.sibling.cls.weight,
        params.sibling.reg.bias,
        params.tsd.f_c.layers[1].bias,
        params.tsd.cls.weight,
        params.tsd.reg.weight,
        params.tsd.fr_rest.layers[-1].bias,
        params.tsd.fc_rest.layers[-1].bias,
    ]

    with no_grad():
        reference = tsd_forward(fmap, boxes, params).p_hat_r.data.copy()

    def f():
        out = tsd_forward(fmap, boxes, params)
        return total_loss(out, labeled, PcConfig(0.2, 0.2), tsd_reference=reference)[0]

    return f, checked


CASES = {
    "matmul": case_matmul,
    "relu": case_relu,
    "softmax_cross_entropy": case_softmax_ce,
    "bilinear_sample": case_bilinear_sample,
    "roi_align": case_roi_align,
    "deformable_pool": case_deformable_pool,
    "translate_then_pool": case_translate_then_pool,
    "smooth_l1": case_smooth_l1,
    "margin_cls": case_margin_cls,
    "margin_loc": case_margin_loc,
    "full_objective": case_full_objective,
}


def max_gradient_error(build, rng, dtype, eps=1e-5) -> float:
    """Worst relative error over the parameters of one random point."""
    twin = copy.deepcopy(rng)
    with T.default_dtype(dtype):
        f, params = build(rng, dtype)
        analytic = analytic_gradient(f, params)
    if dtype != np.float64:
        with T.default_dtype(np.float64):
            f, wide = build(twin, np.float64)
        for w, p in zip(wide, params):
            w.data[...] = p.data
        params = wide
    with T.default_dtype(np.float64):
        return max(relative_error(a, numerical_gradient(f, p, eps)) for a, p in zip(analytic, params))
