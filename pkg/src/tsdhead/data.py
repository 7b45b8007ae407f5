"""Synthetic shapes corpus, proposal jittering and the stride-8 backbone.

Scenes are 128x128 RGB images with 1-4 anti-aliased shapes on a textured
background; the shape type is the class. Everything is a pure function of the
seed. On disk a split is a directory with ``images/*.ppm`` (binary P6) and
``annotations.jsonl`` (one ``{"image", "boxes", "labels"}`` object per line).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .geometry import clip_boxes, iou_matrix
from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SIZE = 128
SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross")
MIN_SIZE, MAX_SIZE = 16.0, 48.0
MIN_AREA = 16.0


@dataclass
class Scene:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    boxes: np.ndarray  # [n, 4] float64, image pixels
    labels: np.ndarray  # [n] int64
    seed: int = 0
    name: str = ""

    @property
    def instances(self):
        return list(zip(map(tuple, self.boxes), self.labels.tolist()))


# ------------------------------------------------------------------ rendering
def _half_plane_sdf(px, py, verts):
    """Signed distance to a convex CCW-or-CW polygon, exact inside and near edges."""
    n = len(verts)
    area2 = sum(verts[i][0] * verts[(i + 1) % n][1] - verts[(i + 1) % n][0] * verts[i][1] for i in range(n))
    sign = 1.0 if area2 > 0 else -1.0
    d = np.full(px.shape, -np.inf)
    for i in range(n):
        (ax, ay), (bx, by) = verts[i], verts[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        length = np.hypot(ex, ey)
        # outward normal for the polygon orientation
        nx, ny = sign * ey / length, -sign * ex / length
        d = np.maximum(d, (px - ax) * nx + (py - ay) * ny)
    return d


def _shape_sdf(kind: str, box, px, py):
    x1, y1, x2, y2 = box
    cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    rx, ry = 0.5 * (x2 - x1), 0.5 * (y2 - y1)
    if kind == "circle":
        return np.hypot(px - cx, py - cy) - rx
    if kind == "square":
        return np.maximum(np.abs(px - cx) - rx, np.abs(py - cy) - ry)
    if kind == "triangle":
        return _half_plane_sdf(px, py, [(cx, y1), (x2, y2), (x1, y2)])
    if kind == "diamond":
        return _half_plane_sdf(px, py, [(cx, y1), (x2, cy), (cx, y2), (x1, cy)])
    if kind == "ring":
        r = np.hypot(px - cx, py - cy)
        return np.maximum(r - rx, 0.55 * rx - r)
    if kind == "cross":
        arm = 0.3
        a = np.maximum(np.abs(px - cx) - rx, np.abs(py - cy) - arm * ry)
        b = np.maximum(np.abs(px - cx) - arm * rx, np.abs(py - cy) - ry)
        return np.minimum(a, b)
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # low-frequency value noise + fine grain
    coarse = rng.uniform(0, 1, size=(5, 5, 3))
    t = np.linspace(0, 4, size)
    i0 = np.minimum(t.astype(int), 3)
    f = (t - i0)[:, None]
    rows = coarse[i0] * (1 - f[:, :, None]) + coarse[i0 + 1] * f[:, :, None]
    g = (t - i0)[None, :, None]
    img = rows[:, i0] * (1 - g) + rows[:, i0 + 1] * g
    base = rng.uniform(0.2, 0.8, size=3)
    img = base + 0.35 * (img - 0.5) + rng.normal(0, 0.04, size=(size, size, 3))
    return img


def generate_scene(rng_seed: int, num_classes: int = 3, size: int = IMAGE_SIZE, name: str = "") -> Scene:
    """Render 1-4 shapes; class index = position of the shape in ``SHAPES``."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if num_classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} shape classes are available")
    rng = np.random.default_rng(rng_seed)
    img = _background(rng, size)
    n_target = int(rng.integers(1, 5))
    boxes: List[np.ndarray] = []
    labels: List[int] = []
    for _ in range(40):
        if len(boxes) == n_target:
            break
        side = rng.uniform(MIN_SIZE, MAX_SIZE)
        aspect = np.exp(rng.uniform(-0.25, 0.25))
        w, h = side * np.sqrt(aspect), side / np.sqrt(aspect)
        label = int(rng.integers(num_classes))
        if SHAPES[label] in ("circle", "ring"):
            w = h = side
        x1 = rng.uniform(1.0, size - 1.0 - w)
        y1 = rng.uniform(1.0, size - 1.0 - h)
        box = np.array([x1, y1, x1 + w, y1 + h])
        if boxes and iou_matrix(box[None], np.array(boxes)).max() > 0.1:
            continue
        boxes.append(box)
        labels.append(label)

    py, px = np.mgrid[0:size, 0:size] + 0.5
    for box, label in zip(boxes, labels):
        sdf = _shape_sdf(SHAPES[label], box, px, py)
        coverage = np.clip(0.5 - sdf, 0.0, 1.0)[:, :, None]
        color = rng.uniform(0, 1, size=3)
        # keep the shape distinguishable from the local background
        local = img[int(box[1]) : int(box[3]), int(box[0]) : int(box[2])].reshape(-1, 3).mean(axis=0)
        if np.abs(color - local).max() < 0.35:
            color = np.where(local > 0.5, local - 0.45, local + 0.45)
        img = img * (1 - coverage) + color * coverage
    return Scene(
        image=np.clip(img, 0, 1).astype(np.float32),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.array(labels, dtype=np.int64),
        seed=int(rng_seed),
        name=name,
    )


def scene_seed(seed: int, split: str, index: int) -> int:
    split_id = {"train": 0, "val": 1, "test": 2}.get(split, 3)
    return int(np.random.SeedSequence([seed, split_id, index]).generate_state(1, dtype=np.uint64)[0])


def generate_corpus(seed: int, count: int, num_classes: int = 3, split: str = "train") -> List[Scene]:
    return [generate_scene(scene_seed(seed, split, i), num_classes, name=f"{i:06d}") for i in range(count)]


# ---------------------------------------------------------------- proposals
def jitter_proposals(
    gts,
    n_per_gt: int,
    rng: np.random.Generator,
    center_jitter: float = 0.3,
    scale_jitter: float = 0.4,
    image_size: float = IMAGE_SIZE,
    n_background: Optional[int] = None,
) -> np.ndarray:
    """Perturbed copies of each gt plus as many random background boxes.

    Centers move uniformly within ±``center_jitter`` of the box size, log
    width/height within ±``scale_jitter``; results are clipped to the image.
    """
    if n_per_gt < 1:
        raise ValueError("n_per_gt must be >= 1")
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    out = []
    if len(gts):
        g = np.repeat(gts, n_per_gt, axis=0)
        w, h = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
        cx, cy = g[:, 0] + 0.5 * w, g[:, 1] + 0.5 * h
        m = len(g)
        cx = cx + rng.uniform(-center_jitter, center_jitter, m) * w
        cy = cy + rng.uniform(-center_jitter, center_jitter, m) * h
        w = w * np.exp(rng.uniform(-scale_jitter, scale_jitter, m))
        h = h * np.exp(rng.uniform(-scale_jitter, scale_jitter, m))
        out.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1))
    n_bg = len(gts) * n_per_gt if n_background is None else n_background
    if n_bg:
        side = np.exp(rng.uniform(np.log(MIN_SIZE * 0.7), np.log(MAX_SIZE * 1.4), n_bg))
        aspect = np.exp(rng.uniform(-0.4, 0.4, n_bg))
        w, h = side * np.sqrt(aspect), side / np.sqrt(aspect)
        x1 = rng.uniform(0, 1, n_bg) * (image_size - w)
        y1 = rng.uniform(0, 1, n_bg) * (image_size - h)
        out.append(np.stack([x1, y1, x1 + w, y1 + h], axis=1))
    if not out:
        return np.zeros((0, 4))
    boxes = clip_boxes(np.concatenate(out), image_size, image_size)
    # clipping can flatten a box against the border; keep a minimal extent
    boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0] + 1.0)
    boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1] + 1.0)
    return boxes


def grid_proposals(
    image_size: float = IMAGE_SIZE,
    sizes: Sequence[float] = (16, 24, 36, 54),
    aspects: Sequence[float] = (1.0,),
    step_fraction: float = 0.3,
) -> np.ndarray:
    """Dense multi-scale sliding-window boxes used at inference in place of an RPN."""
    out = []
    for s in sizes:
        step = max(s * step_fraction, 2.0)
        for a in aspects:
            w, h = s * np.sqrt(a), s / np.sqrt(a)
            xs = np.arange(0, image_size - w + 1e-6, step)
            ys = np.arange(0, image_size - h + 1e-6, step)
            gx, gy = np.meshgrid(xs, ys)
            out.append(np.stack([gx.ravel(), gy.ravel(), gx.ravel() + w, gy.ravel() + h], axis=1))
    return np.concatenate(out)


def hflip(scene: Scene) -> Scene:
    w = scene.image.shape[1]
    boxes = scene.boxes.copy()
    boxes[:, [0, 2]] = w - scene.boxes[:, [2, 0]]
    return Scene(scene.image[:, ::-1].copy(), boxes, scene.labels.copy(), scene.seed, scene.name)


# ------------------------------------------------------------------- corpus I/O
def write_ppm(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return (data.reshape(h, w, 3).astype(np.float32) / maxval).astype(np.float32)


def write_split(directory, scenes: Sequence[Scene]) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for i, scene in enumerate(scenes):
            rel = f"images/{scene.name or f'{i:06d}'}.ppm"
            write_ppm(directory / rel, scene.image)
            record = {"image": rel, "boxes": scene.boxes.tolist(), "labels": scene.labels.tolist()}
            fh.write(json.dumps(record) + "\n")
    return directory


def read_split(directory) -> List[Scene]:
    """Load a split; zero-area ground-truth boxes are dropped with a warning."""
    directory = Path(directory)
    scenes = []
    with open(directory / "annotations.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
            labels = np.asarray(rec["labels"], dtype=np.int64)
            ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            if not ok.all():
                log.warning("%s: dropping %d degenerate box(es)", rec["image"], int((~ok).sum()))
            scenes.append(Scene(read_ppm(directory / rec["image"]), boxes[ok], labels[ok], name=Path(rec["image"]).stem))
    return scenes


def resolve_split(directory, split: str) -> Path:
    """``directory/split`` if that exists, else ``directory`` itself."""
    directory = Path(directory)
    return directory / split if (directory / split / "annotations.jsonl").exists() else directory


def write_corpus(out, train: int, val: int, seed: int, num_classes: int = 3) -> Path:
    out = Path(out)
    write_split(out / "train", generate_corpus(seed, train, num_classes, "train"))
    write_split(out / "val", generate_corpus(seed, val, num_classes, "val"))
    meta = {"seed": seed, "classes": num_classes, "class_names": list(SHAPES[:num_classes]), "image_size": IMAGE_SIZE}
    (out / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return out


# ------------------------------------------------------------------- backbone
class TinyBackbone(nn.Module):
    """3x3 convolutions with three stride-2 stages: [B, H, W, 3] -> [B, H/8, W/8, C]."""

    stride = 8

    def __init__(self, rng: np.random.Generator, channels: int = 64, widths: Sequence[int] = (16, 32)):
        c1, c2 = widths
        self.convs = [
            nn.Conv2d(3, c1, rng, stride=2),
            nn.Conv2d(c1, c2, rng, stride=2),
            nn.Conv2d(c2, channels, rng, stride=2),
            nn.Conv2d(channels, channels, rng, stride=1),
        ]

    def __call__(self, images) -> Tensor:
        x = T.as_tensor(images)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        x = x - 0.5
        for conv in self.convs:
            x = T.relu(conv(x))
        return x
