import numpy as np
import pytest

from tsdhead import tensor as T
from tsdhead.geometry import DegenerateBoxError
from tsdhead.gradcheck import finite_difference_check
from tsdhead.roi_ops import POOL_SIZE, deformable_pool, roi_align, translate_proposal
from tsdhead.tensor import ShapeError, Tensor

from oracles import dense_box_average, roi_align_point_loops


def random_box(rng, H, W, min_side=1.0):
    w, h = rng.uniform(min_side, W * 0.7), rng.uniform(min_side, H * 0.7)
    x, y = rng.uniform(-1, W - w), rng.uniform(-1, H - h)
    return np.array([x, y, x + w, y + h])


def test_default_pool_size():
    assert POOL_SIZE == 7


def test_constant_map():
    fmap = np.full((9, 9, 3), 2.5)
    out = roi_align(Tensor(fmap), np.array([[1.2, 0.7, 6.3, 5.9]]), 7, 2).data
    assert out.shape == (1, 7, 7, 3)
    assert np.allclose(out, 2.5, atol=1e-12)


def test_ramp_single_bin_equals_dense_average():
    H, W = 12, 14
    a, b, c = 0.7, -0.3, 2.0
    ys, xs = np.mgrid[0:H, 0:W]
    fmap = (a * xs + b * ys + c)[:, :, None].astype(np.float64)
    for box in [(2, 3, 9, 8), (1, 1, 4, 10), (5, 2, 12, 6)]:
        out = roi_align(Tensor(fmap), np.array([box], dtype=np.float64), 1, 2).data[0, 0, 0, 0]
        expected = dense_box_average(lambda x, y: a * x + b * y + c, box)
        assert out == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("k, s", [(1, 1), (2, 2), (3, 2), (7, 2)])
def test_matches_loop_reference(k, s):
    rng = np.random.default_rng(k * 10 + s)
    fmap = rng.normal(size=(8, 10, 2))
    for _ in range(5):
        box = random_box(rng, 8, 10)
        out = roi_align(Tensor(fmap), box[None], k, s).data[0]
        assert np.allclose(out, roi_align_point_loops(fmap.tolist(), box, k, s), atol=1e-12)


def test_deformable_matches_loop_reference():
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(8, 8, 3))
    box = random_box(rng, 8, 8)
    offsets = rng.normal(scale=0.8, size=(1, 3, 3, 2))
    out = deformable_pool(Tensor(fmap), box[None], Tensor(offsets), 3, 2).data[0]
    assert np.allclose(out, roi_align_point_loops(fmap.tolist(), box, 3, 2, offsets[0]), atol=1e-12)


def test_batch_index_selects_image():
    rng = np.random.default_rng(2)
    maps = rng.normal(size=(3, 6, 6, 2))
    boxes = np.array([[0.5, 0.5, 4.0, 4.5], [1.0, 0.2, 5.0, 3.0]])
    out = roi_align(Tensor(maps), boxes, 2, 2, batch_index=np.array([2, 0])).data
    assert np.allclose(out[0], roi_align(Tensor(maps[2]), boxes[:1], 2, 2).data[0])
    assert np.allclose(out[1], roi_align(Tensor(maps[0]), boxes[1:], 2, 2).data[0])


@pytest.mark.parametrize("box", [(1, 1, 1, 4), (2, 3, 5, 3), (4, 4, 2, 6)])
def test_degenerate_box(box):
    with pytest.raises(DegenerateBoxError):
        roi_align(Tensor(np.ones((5, 5, 1))), np.array([box], dtype=np.float64), 2, 2)


def test_offsets_shape_checked():
    with pytest.raises(ShapeError):
        deformable_pool(Tensor(np.ones((5, 5, 1))), np.array([[0, 0, 3, 3.0]]), Tensor(np.zeros((1, 2, 2, 2))), 3, 2)


class TestTranslate:
    def test_identity(self):
        assert np.array_equal(translate_proposal(np.array([[1.0, 2, 3, 4]]), np.zeros((1, 2))).data, [[1, 2, 3, 4]])

    def test_hand_value(self):
        out = translate_proposal(np.array([[10.0, 10, 30, 20]]), np.array([[2.0, -3.0]])).data
        assert out.tolist() == [[12.0, 7.0, 32.0, 17.0]]

    def test_inverse(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0, 50, size=(10, 4))
        dr = rng.normal(size=(10, 2))
        back = translate_proposal(translate_proposal(p, dr).data, -dr).data
        assert np.allclose(back, p, atol=1e-12)

    def test_size_preserved_exactly(self):
        rng = np.random.default_rng(4)
        xy = rng.uniform(0, 50, size=(20, 2))
        p = np.concatenate([xy, xy + rng.uniform(0.3, 20, size=(20, 2))], axis=1)
        q = translate_proposal(p, np.full((20, 2), 0.25)).data
        assert np.array_equal(q[:, 2] - q[:, 0], p[:, 2] - p[:, 0])
        assert np.array_equal(q[:, 3] - q[:, 1], p[:, 3] - p[:, 1])


def test_uniform_offset_on_constant_map_is_noop():
    fmap = np.full((10, 10, 2), -1.5)
    box = np.array([[2.0, 2.0, 7.0, 6.0]])
    offsets = np.zeros((1, 7, 7, 2))
    offsets[..., 0] = 0.6
    out = deformable_pool(Tensor(fmap), box, Tensor(offsets), 7, 2).data
    assert np.allclose(out, -1.5, atol=1e-12)


def test_pooling_gradient_reaches_map_and_offsets():
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(5)
        fmap = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
        offsets = Tensor(rng.uniform(-0.3, 0.3, size=(1, 2, 2, 2)), requires_grad=True)
        box = np.array([[1.13, 0.87, 4.41, 3.62]])
        w = rng.normal(size=(1, 2, 2, 2))
        err = finite_difference_check(lambda: T.sum_(deformable_pool(fmap, box, offsets, 2, 2) * w), [fmap, offsets], eps=1e-6)
        assert err < 1e-6
        T.sum_(deformable_pool(fmap, box, offsets, 2, 2) * w).backward()
        assert np.abs(offsets.grad).max() > 0
