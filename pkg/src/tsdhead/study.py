"""Head-to-head comparison of the three training modes under one budget.

The desk profile shrinks the head (32 feature channels, 256-wide hidden
layers, 64 sampled proposals per image) so that three modes x three seeds
train on a single CPU core in well under an hour. All modes share the
profile, corpus and schedule; only the mode and the training seed change.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .data import Scene, generate_corpus
from .evaluation import FIG_THRESHOLDS
from .train import TrainConfig, evaluate_detector, train

DESK_PROFILE = dict(feat_channels=32, hidden=256, rois_per_image=64)
STUDY_MODES = ("sibling", "tsd", "tsd+pc")


@dataclass
class StudyConfig:
    epochs: int = 8
    seeds: Sequence[int] = (0, 1, 2)
    modes: Sequence[str] = STUDY_MODES
    corpus_seed: int = 0
    train_scenes: int = 500
    val_scenes: int = 100
    num_classes: int = 3
    profile: Dict[str, int] = field(default_factory=lambda: dict(DESK_PROFILE))

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        return TrainConfig.desk(self.epochs, mode=mode, seed=seed, num_classes=self.num_classes, **self.profile)


@dataclass
class RunResult:
    mode: str
    seed: int
    map: Dict[float, float]
    coco_map: float
    seconds: float
    final_losses: Dict[str, float]


def run_study(cfg: StudyConfig, train_set: Optional[List[Scene]] = None, val_set: Optional[List[Scene]] = None, log=print) -> List[RunResult]:
    if train_set is None:
        train_set = generate_corpus(cfg.corpus_seed, cfg.train_scenes, cfg.num_classes, "train")
    if val_set is None:
        val_set = generate_corpus(cfg.corpus_seed, cfg.val_scenes, cfg.num_classes, "val")
    results = []
    for seed in cfg.seeds:
        for mode in cfg.modes:
            start = time.perf_counter()
            det, metrics = train(train_set, cfg.train_config(mode, seed))
            report = evaluate_detector(det, val_set, FIG_THRESHOLDS)
            res = RunResult(mode, seed, report.map, report.coco_map, time.perf_counter() - start, metrics[-1])
            results.append(res)
            if log is not None:
                log(f"{mode:>7} seed {seed}: " + " ".join(f"{t:.1f}:{v:.3f}" for t, v in res.map.items()) + f" ({res.seconds:.0f}s)")
    return results


def by_seed(results: Sequence[RunResult]) -> Dict[int, Dict[str, RunResult]]:
    out: Dict[int, Dict[str, RunResult]] = {}
    for r in results:
        out.setdefault(r.seed, {})[r.mode] = r
    return out


def save_results(results: Sequence[RunResult], path) -> None:
    rows = [
        {"mode": r.mode, "seed": r.seed, "map": {f"{t:.1f}": v for t, v in r.map.items()}, "coco_map": r.coco_map, "seconds": r.seconds}
        for r in results
    ]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
