"""SGD training with linear warmup and step decay, for the three head configurations.

Modes
-----
``sibling``  classical head only: L_cls + L_loc.
``tsd``      TSD head trained jointly with the sibling head (unless
             ``joint=False``): L_cls + L_loc + L^D_cls + L^D_loc.
``tsd+pc``   the above plus the two progressive-constraint margins.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Scene, hflip, jitter_proposals
from .detector import MODES, Detector, DetectorConfig, infer_batch
from .evaluation import FIG_THRESHOLDS, EvalReport, evaluate
from .losses import LOSS_KEYS, LabeledProposals, PcConfig, assign_labels, sample_proposals, total_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; the last good parameters were checkpointed if possible."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    base_lr: float = 0.01
    warmup_start_lr: float = 0.0003125
    warmup_epochs: float = 1.0
    decay_epochs: Tuple[int, ...] = (12, 17)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pc: PcConfig = field(default_factory=PcConfig)
    mode: str = "tsd+pc"
    seed: int = 0
    joint: bool = True
    rois_per_image: int = 128
    positive_fraction: float = 0.25
    jitter_per_gt: int = 32
    hflip: bool = True
    num_classes: int = 3
    feat_channels: int = 64
    hidden: int = 1024
    gamma: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.warmup_start_lr < self.base_lr:
            raise ValueError("warmup_start_lr must be below base_lr")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if isinstance(self.pc, dict):
            self.pc = PcConfig(**self.pc)

    @classmethod
    def desk(cls, epochs: int = 20, **kw) -> "TrainConfig":
        """Schedule shape of the reference setup (decays at ~60% and ~85% of training)."""
        decays = (max(1, round(0.6 * epochs)), max(2, round(0.85 * epochs)))
        if decays[1] <= decays[0]:
            decays = (decays[0], decays[0] + 1)
        return cls(epochs=epochs, decay_epochs=decays, **kw)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            mode=self.mode,
            num_classes=self.num_classes,
            feat_channels=self.feat_channels,
            hidden=self.hidden,
            gamma=self.gamma,
        )


# ------------------------------------------------------------------ optimizer
def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from warmup_start_lr to base_lr, then x0.1 at each passed decay epoch."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    if step < warm:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step / warm
    passed = sum(step >= e * steps_per_epoch for e in cfg.decay_epochs)
    return cfg.base_lr * 0.1 ** passed


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    step: Optional[int] = None,
) -> Dict[str, np.ndarray]:
    """In place: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name!r} at step {step}")
        if g.shape != p.shape:
            raise T.ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        d = g + weight_decay * p
        v = state.get(name)
        v = d if v is None else momentum * v + d
        state[name] = v.astype(p.dtype, copy=False)
        p -= (lr * state[name]).astype(p.dtype, copy=False)
    return state


# ------------------------------------------------------------------- batches
def _labeled_for_scene(scene: Scene, cfg: TrainConfig, rng: np.random.Generator) -> LabeledProposals:
    props = jitter_proposals(scene.boxes, cfg.jitter_per_gt, rng, image_size=scene.image.shape[1])
    if len(scene.boxes):
        props = np.concatenate([props, scene.boxes])
    labeled = assign_labels(props, scene.boxes, scene.labels)
    return sample_proposals(labeled, rng, cfg.rois_per_image, cfg.positive_fraction)


def build_batch(scenes: Sequence[Scene], cfg: TrainConfig, rng: np.random.Generator, max_tries: int = 20):
    """Images plus sampled, labelled proposals; redrawn until >= 1 positive and >= 1 negative."""
    for _ in range(max_tries):
        parts = [_labeled_for_scene(s, cfg, rng) for s in scenes]
        labeled = LabeledProposals.concat(parts)
        if labeled.is_positive.any() and (~labeled.is_positive).any():
            batch_index = np.repeat(np.arange(len(parts)), [len(p) for p in parts])
            images = np.stack([s.image for s in scenes]).astype(T.get_default_dtype())
            return images, labeled, batch_index
    raise RuntimeError("could not draw a batch with both positive and negative proposals")


def loss_switches(cfg: TrainConfig):
    """(use_sibling, use_tsd, pc) for the configured mode."""
    if cfg.mode == "sibling":
        return True, False, None
    if cfg.mode == "tsd":
        return cfg.joint, True, None
    return True, True, cfg.pc


# ---------------------------------------------------------------------- train
def train(
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    out: Optional[Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Tuple[Detector, List[dict]]:
    """Train a detector; returns it with the per-epoch metrics log.

    With ``out`` set, the checkpoint and ``metrics.jsonl`` are written there.
    Deterministic for a fixed seed: one RNG stream drives init, shuffling,
    flips and proposal sampling, and the graph runs single-threaded.
    """
    if not scenes:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(cfg.seed)
    use_sibling, use_tsd, pc = loss_switches(cfg)
    det = Detector(cfg.detector_config(), seed=int(rng.integers(2**31)), with_sibling=use_sibling)
    named = dict(det.named_parameters())
    state: Dict[str, np.ndarray] = {}
    steps_per_epoch = math.ceil(len(scenes) / cfg.batch_size)
    metrics: List[dict] = []
    step = 0
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("", encoding="utf-8")

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        lr = cfg.base_lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [scenes[i] for i in idx]
            if cfg.hflip:
                batch = [hflip(s) if rng.random() < 0.5 else s for s in batch]
            images, labeled, batch_index = build_batch(batch, cfg, rng)

            fmap = det.features(T.Tensor(images))
            outp = det.forward(fmap, labeled.boxes, batch_index, with_sibling=use_sibling, with_tsd=use_tsd)
            loss, terms = total_loss(outp, labeled, pc, use_sibling=use_sibling, use_tsd=use_tsd)
            if not np.isfinite(loss.data):
                _abort(det, out, cfg, f"non-finite loss at epoch {epoch} step {step}: {terms}")

            det.zero_grad()
            loss.backward()
            lr = lr_at(step, cfg, steps_per_epoch)
            params = {n: p.data for n, p in named.items()}
            grads = {n: p.grad for n, p in named.items() if p.grad is not None}
            try:
                sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay, step=step)
            except TrainingDiverged as exc:
                _abort(det, out, cfg, str(exc))
            for k, v in terms.items():
                sums[k] += v
            step += 1

        row = {"epoch": epoch + 1}
        row.update({k: sums[k] / steps_per_epoch for k in LOSS_KEYS})
        row["lr"] = lr
        metrics.append(row)
        log.info("epoch %d %s", epoch + 1, " ".join(f"{k}={row[k]:.4f}" for k in LOSS_KEYS))
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        if on_epoch is not None:
            on_epoch(row)

    if out is not None:
        det.save(out, {"train": _cfg_dict(cfg)})
    return det, metrics


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["decay_epochs"] = list(cfg.decay_epochs)
    return d


def _abort(det: Detector, out: Optional[Path], cfg: TrainConfig, message: str):
    # parameters are only mutated by a successful sgd_step, so they are the last good ones
    if out is not None:
        det.save(out, {"train": _cfg_dict(cfg), "aborted": message})
    raise TrainingDiverged(message)


# ----------------------------------------------------------------- evaluation
def evaluate_detector(
    det: Detector,
    scenes: Sequence[Scene],
    thresholds: Sequence[float] = FIG_THRESHOLDS,
    batch_size: int = 4,
) -> EvalReport:
    detections = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i : i + batch_size]
        detections.extend(infer_batch(det, [s.image for s in chunk]))
    return evaluate(
        detections,
        [s.boxes for s in scenes],
        [s.labels for s in scenes],
        thresholds,
        num_classes=det.cfg.num_classes,
    )
