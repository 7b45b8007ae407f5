"""Backbone + head bundle, checkpoint round-trip and inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import nn
from . import tensor as T
from .data import IMAGE_SIZE, TinyBackbone, grid_proposals
from .geometry import DELTA_WEIGHTS, MAX_LOG_SCALE, Box, Detection, clip_boxes, decode_deltas, nms_indices
from .heads import HeadConfig, HeadOutput, HeadParams, tsd_forward

MODES = ("sibling", "tsd", "tsd+pc")


@dataclass
class DetectorConfig:
    mode: str = "tsd+pc"
    num_classes: int = 3
    feat_channels: int = 64
    hidden: int = 1024
    gamma: float = 0.1
    pool_size: int = 7
    samples_per_bin: int = 2
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            num_classes=self.num_classes,
            feat_channels=self.feat_channels,
            pool_size=self.pool_size,
            samples_per_bin=self.samples_per_bin,
            hidden=self.hidden,
            gamma=self.gamma,
            stride=TinyBackbone.stride,
        )


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0, with_sibling: Optional[bool] = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        uses_tsd = cfg.mode != "sibling"
        if with_sibling is None:
            with_sibling = True
        self.backbone = TinyBackbone(rng, channels=cfg.feat_channels)
        self.head = HeadParams(cfg.head_config(), rng, with_sibling=with_sibling, with_tsd=uses_tsd)

    @property
    def uses_tsd(self) -> bool:
        return self.cfg.mode != "sibling"

    def features(self, images):
        return self.backbone(images)

    def forward(self, fmap, boxes, batch_index=None, with_sibling=True, with_tsd=True) -> HeadOutput:
        return tsd_forward(fmap, boxes, self.head, batch_index, with_sibling=with_sibling, with_tsd=with_tsd and self.uses_tsd)

    # ------------------------------------------------------------ inference
    def score_and_boxes(self, fmap, boxes, batch_index=None):
        """Post-softmax class probabilities [R, C+1] and class-specific boxes [R, C, 4].

        TSD checkpoints use only the TSD branches (scores from the P̂_c branch,
        boxes decoded from the P̂_r branch relative to P̂_r); sibling
        checkpoints use the sibling head relative to P.
        """
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        with T.no_grad():
            if self.uses_tsd:
                out = self.forward(fmap, boxes, batch_index, with_sibling=False)
                logits, deltas, ref = out.tsd_logits, out.tsd_deltas, out.p_hat_r.data.astype(np.float64)
            else:
                out = self.forward(fmap, boxes, batch_index, with_tsd=False)
                logits, deltas, ref = out.sibling_logits, out.sibling_deltas, boxes
            probs = T.softmax(logits, axis=1).data.astype(np.float64)
        C = self.cfg.num_classes
        d = deltas.data.astype(np.float64).reshape(-1, C, 4) / np.asarray(DELTA_WEIGHTS)
        d[..., 2:] = np.minimum(d[..., 2:], MAX_LOG_SCALE)
        decoded = decode_deltas(np.repeat(ref[:, None, :], C, axis=1), d)
        return probs, decoded

    # ------------------------------------------------------------ checkpoint
    def save(self, path, extra: Optional[dict] = None) -> Path:
        meta = {"config": asdict(self.cfg), "with_sibling": self.head.sibling is not None}
        meta.update(extra or {})
        return nn.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "Detector":
        params, meta = nn.load_checkpoint(path)
        det = cls(DetectorConfig(**meta["config"]), with_sibling=meta.get("with_sibling", True))
        det.load_state_dict(params)
        return det


def infer(
    detector: Detector,
    image: np.ndarray,
    proposals: Optional[np.ndarray] = None,
    score_threshold: float = 0.05,
    nms_threshold: float = 0.5,
    max_detections: int = 100,
) -> List[Detection]:
    return infer_batch(detector, [image], None if proposals is None else [proposals], score_threshold, nms_threshold, max_detections)[0]


def infer_batch(
    detector: Detector,
    images,
    proposals=None,
    score_threshold: float = 0.05,
    nms_threshold: float = 0.5,
    max_detections: int = 100,
) -> List[List[Detection]]:
    """Detections per image: decode, clip, per-class score filter, class-wise NMS."""
    images = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    n, h, w = images.shape[:3]
    if proposals is None:
        grid = grid_proposals(float(w))
        proposals = [grid] * n
    boxes = [np.asarray(p, dtype=np.float64).reshape(-1, 4) for p in proposals]
    with T.no_grad():
        fmap = detector.features(T.Tensor(images))
    counts = [len(b) for b in boxes]
    results = []
    if sum(counts) == 0:
        return [[] for _ in range(n)]
    batch_index = np.repeat(np.arange(n), counts)
    probs, decoded = detector.score_and_boxes(fmap, np.concatenate(boxes), batch_index)
    C = detector.cfg.num_classes
    start = 0
    for i, cnt in enumerate(counts):
        p = probs[start : start + cnt, 1:]
        b = clip_boxes(decoded[start : start + cnt], float(w), float(h))
        start += cnt
        rows, cls = np.nonzero(p > score_threshold)
        if len(rows) == 0:
            results.append([])
            continue
        cand_boxes = b[rows, cls]
        cand_scores = p[rows, cls]
        ok = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])
        cand_boxes, cand_scores, cls = cand_boxes[ok], cand_scores[ok], cls[ok]
        keep = nms_indices(cand_boxes, cand_scores, cls, nms_threshold)[:max_detections]
        results.append([Detection(Box(*map(float, cand_boxes[j])), int(cls[j]), float(cand_scores[j])) for j in keep])
    return results
