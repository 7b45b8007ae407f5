import json
import time

import numpy as np
import pytest

from tsdhead import tensor as T
from tsdhead.data import (
    IMAGE_SIZE,
    MIN_AREA,
    TinyBackbone,
    generate_corpus,
    generate_scene,
    grid_proposals,
    hflip,
    jitter_proposals,
    read_ppm,
    read_split,
    write_corpus,
    write_ppm,
)
from tsdhead.geometry import area, iou_matrix
from tsdhead.losses import assign_labels
from tsdhead.train import TrainConfig, build_batch


def test_same_seed_same_scene():
    a, b = generate_scene(1234), generate_scene(1234)
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.labels, b.labels)


def test_different_seeds_differ():
    assert generate_scene(1).image.tobytes() != generate_scene(2).image.tobytes()


def test_scene_invariants():
    for scene in generate_corpus(7, 200):
        assert scene.image.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
        assert scene.image.dtype == np.float32
        assert 0.0 <= scene.image.min() and scene.image.max() <= 1.0
        assert 1 <= len(scene.boxes) <= 4
        assert set(scene.labels.tolist()) <= {0, 1, 2}
        assert (area(scene.boxes) >= MIN_AREA).all()
        assert (scene.boxes >= 0).all() and (scene.boxes <= IMAGE_SIZE).all()


def test_more_classes():
    labels = np.concatenate([s.labels for s in generate_corpus(0, 100, num_classes=5)])
    assert set(labels.tolist()) == set(range(5))


@pytest.mark.parametrize("k", [1, 7])
def test_class_count_bounds(k):
    with pytest.raises(ValueError):
        generate_scene(0, num_classes=k)


def test_corpus_generation_speed():
    start = time.perf_counter()
    generate_corpus(99, 500)
    assert time.perf_counter() - start < 10.0


class TestJitter:
    GTS = np.array([[10.0, 20.0, 40.0, 44.0], [60.0, 60.0, 90.0, 100.0]])

    def test_zero_magnitude_reproduces_gts(self):
        rng = np.random.default_rng(0)
        out = jitter_proposals(self.GTS, 3, rng, center_jitter=0.0, scale_jitter=0.0, n_background=0)
        assert np.allclose(out, np.repeat(self.GTS, 3, axis=0))

    def test_counts_and_clipping(self):
        out = jitter_proposals(self.GTS, 5, np.random.default_rng(1))
        assert len(out) == 20
        assert (out >= 0).all() and (out <= IMAGE_SIZE).all()
        assert ((out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1])).all()

    def test_deterministic(self):
        a = jitter_proposals(self.GTS, 4, np.random.default_rng(5))
        b = jitter_proposals(self.GTS, 4, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_iou_histogram_spans_threshold(self):
        rng = np.random.default_rng(2)
        gt = self.GTS[:1]
        out = jitter_proposals(gt, 10_000, rng, n_background=0)
        ious = iou_matrix(out, gt)[:, 0]
        hist, _ = np.histogram(ious, bins=[0, 0.5, 1.0 + 1e-9])
        assert hist[0] > 0 and hist[1] > 0

    def test_rejects_zero_per_gt(self):
        with pytest.raises(ValueError):
            jitter_proposals(self.GTS, 0, np.random.default_rng(0))


def test_every_batch_has_positive_and_negative():
    cfg = TrainConfig(rois_per_image=16, jitter_per_gt=4)
    rng = np.random.default_rng(3)
    scenes = generate_corpus(3, 40)
    for i in range(0, 40, 4):
        _, labeled, batch_index = build_batch(scenes[i : i + 4], cfg, rng)
        assert labeled.is_positive.any() and (~labeled.is_positive).any()
        assert len(batch_index) == len(labeled)


def test_grid_proposals_inside_image():
    g = grid_proposals()
    assert len(g) > 500
    assert (g >= 0).all() and (g <= IMAGE_SIZE + 1e-6).all()


def test_hflip_mirrors_boxes():
    s = generate_scene(5)
    f = hflip(s)
    assert np.array_equal(f.image, s.image[:, ::-1])
    assert np.allclose(f.boxes[:, 0], IMAGE_SIZE - s.boxes[:, 2])
    assert np.allclose(hflip(f).boxes, s.boxes)


def test_backbone_stride():
    bb = TinyBackbone(np.random.default_rng(0), channels=6)
    out = bb(T.Tensor(np.zeros((2, 64, 48, 3), dtype=np.float32)))
    assert out.shape == (2, 8, 6, 6)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3)).astype(np.float32)
    write_ppm(tmp_path / "x.ppm", img)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == img.shape and np.abs(back - img).max() <= 0.5 / 255 + 1e-7


def test_corpus_on_disk(tmp_path):
    write_corpus(tmp_path, 6, 3, seed=4)
    lines = (tmp_path / "train" / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[0])
    assert set(rec) == {"image", "boxes", "labels"}
    scenes = read_split(tmp_path / "val")
    mem = generate_corpus(4, 3, split="val")
    for a, b in zip(scenes, mem):
        assert np.allclose(a.boxes, b.boxes) and np.array_equal(a.labels, b.labels)
    assert json.loads((tmp_path / "meta.json").read_text())["classes"] == 3


def test_degenerate_ground_truth_dropped(tmp_path, caplog):
    write_corpus(tmp_path, 1, 1, seed=0)
    ann = tmp_path / "val" / "annotations.jsonl"
    rec = json.loads(ann.read_text())
    rec["boxes"].append([5.0, 5.0, 5.0, 9.0])
    rec["labels"].append(1)
    ann.write_text(json.dumps(rec) + "\n")
    scenes = read_split(tmp_path / "val")
    assert len(scenes[0].boxes) == len(rec["boxes"]) - 1
    assert "degenerate" in caplog.text


def test_assignments_on_scene_cover_every_class():
    scenes = generate_corpus(0, 30)
    labels = set()
    for s in scenes:
        props = jitter_proposals(s.boxes, 8, np.random.default_rng(0))
        labels |= set(assign_labels(props, s.boxes, s.labels).labels.tolist())
    assert labels == {-1, 0, 1, 2}
