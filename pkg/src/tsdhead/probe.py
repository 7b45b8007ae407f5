"""Translation-sensitivity probe.

A proposal the size of a ground-truth instance is swept over a square grid of
offsets within ±half its width/height. At every offset we record the
post-softmax probability of the true class and the IoU between the regressed
box and the ground truth, giving a classification map and a localization map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from scipy import stats

from . import tensor as T
from .data import Scene
from .detector import Detector
from .geometry import Box, iou_matrix

IOU_REGION_THRESHOLD = 0.5


@dataclass
class SensitivityMap:
    grid: np.ndarray  # [n, n] in [0, 1]; row = vertical offset, column = horizontal offset
    stride: Tuple[float, float]  # (x, y) pixels between neighbouring cells
    center_instance: Tuple[Box, int]
    raw: np.ndarray  # unnormalized values

    @property
    def shape(self):
        return self.grid.shape


def normalize(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]. A single cell becomes 1.0; a constant map of several cells becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 1:
        return np.ones_like(values)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def offset_grid(width: float, height: float, grid_n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical offsets, each of length ``grid_n`` and centred on 0."""
    if grid_n < 1 or grid_n % 2 == 0:
        raise ValueError("grid_n must be a positive odd integer")
    return np.linspace(-0.5 * width, 0.5 * width, grid_n), np.linspace(-0.5 * height, 0.5 * height, grid_n)


def _shifted_proposals(gt: np.ndarray, dxs: np.ndarray, dys: np.ndarray) -> np.ndarray:
    oy, ox = np.meshgrid(dys, dxs, indexing="ij")
    shift = np.stack([ox.ravel(), oy.ravel(), ox.ravel(), oy.ravel()], axis=1)
    return gt[None, :] + shift


def sensitivity_scan(det: Detector, scene: Scene, instance_index: int, grid_n: int) -> Tuple[SensitivityMap, SensitivityMap]:
    """(classification map, localization map) for one instance of ``scene``."""
    n_inst = len(scene.boxes)
    if not -n_inst <= instance_index < n_inst:
        raise IndexError(f"instance {instance_index} out of range for a scene with {n_inst} instance(s)")
    gt = np.asarray(scene.boxes[instance_index], dtype=np.float64)
    label = int(scene.labels[instance_index])
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    dxs, dys = offset_grid(w, h, grid_n)
    proposals = _shifted_proposals(gt, dxs, dys)

    with T.no_grad():
        fmap = det.features(T.Tensor(scene.image[None].astype(T.get_default_dtype())))
    probs, decoded = det.score_and_boxes(fmap, proposals)
    cls_raw = probs[:, label + 1].reshape(grid_n, grid_n)
    loc_raw = iou_matrix(decoded[:, label], gt[None])[:, 0].reshape(grid_n, grid_n)

    step = (float(dxs[1] - dxs[0]), float(dys[1] - dys[0])) if grid_n > 1 else (0.0, 0.0)
    inst = (Box(*map(float, gt)), label)
    return (
        SensitivityMap(normalize(cls_raw), step, inst, cls_raw),
        SensitivityMap(normalize(loc_raw), step, inst, loc_raw),
    )


def iou_region(gt, grid_n: int, threshold: float = IOU_REGION_THRESHOLD) -> np.ndarray:
    """Boolean [n, n] mask of offsets whose shifted proposal keeps IoU >= threshold with the instance."""
    gt = np.asarray(gt, dtype=np.float64)
    dxs, dys = offset_grid(gt[2] - gt[0], gt[3] - gt[1], grid_n)
    ious = iou_matrix(_shifted_proposals(gt, dxs, dys), gt[None])[:, 0]
    return (ious >= threshold).reshape(grid_n, grid_n)


def _argmax_cell(grid: np.ndarray) -> Tuple[int, int]:
    # np.argmax returns the first maximum in row-major order
    return np.unravel_index(int(np.argmax(grid)), grid.shape)


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties; 0.0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(stats.spearmanr(a, b).statistic)


def divergence(cls_map, loc_map) -> Dict[str, float]:
    """Pixel distance between the two argmax cells and the Spearman correlation of the grids."""
    a = cls_map.grid if isinstance(cls_map, SensitivityMap) else np.asarray(cls_map)
    b = loc_map.grid if isinstance(loc_map, SensitivityMap) else np.asarray(loc_map)
    if a.shape != b.shape:
        raise T.ShapeError(f"maps differ in shape: {a.shape} vs {b.shape}")
    sx, sy = cls_map.stride if isinstance(cls_map, SensitivityMap) else (1.0, 1.0)
    if isinstance(cls_map, SensitivityMap) and isinstance(loc_map, SensitivityMap) and cls_map.stride != loc_map.stride:
        raise T.ShapeError("maps differ in grid spacing")
    (ra, ca), (rb, cb) = _argmax_cell(a), _argmax_cell(b)
    return {
        "argmax_distance": float(np.hypot((ca - cb) * sx, (ra - rb) * sy)),
        "rank_correlation": spearman(a, b),
    }


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary (P5) grayscale; 0 maps to black, 1 to white."""
    arr = np.clip(np.round(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, maxval, pixels = raw.split(maxsplit=4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(w), int(h)
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)


def run_probe(det: Detector, scene: Scene, instance_index: int, grid_n: int, prefix) -> dict:
    """Write ``prefix.cls.pgm``, ``prefix.loc.pgm`` and ``prefix.stats.json``; returns the stats."""
    cls_map, loc_map = sensitivity_scan(det, scene, instance_index, grid_n)
    box, label = cls_map.center_instance
    region = iou_region(tuple(box), grid_n)
    stats_out = {
        "scene": scene.name,
        "instance": int(instance_index),
        "box": list(box),
        "label": label,
        "grid": grid_n,
        "stride": list(cls_map.stride),
        **divergence(cls_map, loc_map),
        "cls_argmax": [int(v) for v in _argmax_cell(cls_map.grid)],
        "loc_argmax": [int(v) for v in _argmax_cell(loc_map.grid)],
        "cls_raw_range": [float(cls_map.raw.min()), float(cls_map.raw.max())],
        "loc_raw_range": [float(loc_map.raw.min()), float(loc_map.raw.max())],
        "iou_region": {
            "threshold": IOU_REGION_THRESHOLD,
            "cells": int(region.sum()),
            "mask": region.astype(int).tolist(),
        },
    }
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(f"{prefix}.cls.pgm", cls_map.grid)
    write_pgm(f"{prefix}.loc.pgm", loc_map.grid)
    Path(f"{prefix}.stats.json").write_text(json.dumps(stats_out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stats_out
