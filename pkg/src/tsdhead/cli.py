"""Command line: gen-data, train, eval, probe."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import read_split, resolve_split, write_corpus
from .detector import MODES, Detector
from .losses import PcConfig
from .probe import run_probe
from .train import TrainConfig, TrainingDiverged, evaluate_detector, train


def _gen_data(args) -> int:
    out = write_corpus(args.out, args.train, args.val, args.seed, args.classes)
    print(f"wrote {args.train} train / {args.val} val scenes to {out}")
    return 0


def _train(args) -> int:
    scenes = read_split(resolve_split(args.data, "train"))
    meta_path = Path(args.data) / "meta.json"
    classes = json.loads(meta_path.read_text())["classes"] if meta_path.exists() else args.classes
    cfg = TrainConfig.desk(
        args.epochs,
        mode=args.mode,
        seed=args.seed,
        pc=PcConfig(args.mc, args.mr),
        gamma=args.gamma,
        joint=not args.tsd_only,
        num_classes=classes,
        batch_size=args.batch_size,
        base_lr=args.lr,
        feat_channels=args.feat_channels,
        hidden=args.hidden,
        rois_per_image=args.rois,
    )
    try:
        train(scenes, cfg, out=args.out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    print(f"checkpoint and metrics.jsonl written to {args.out}")
    return 0


def _eval(args) -> int:
    det = Detector.load(args.ckpt)
    scenes = read_split(resolve_split(args.data, "val"))
    report = evaluate_detector(det, scenes)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(" ".join(f"mAP@{t:.1f}={v:.4f}" for t, v in report.map.items()))
    return 0


def _probe(args) -> int:
    det = Detector.load(args.ckpt)
    scenes = read_split(resolve_split(args.data, "val"))
    if not 0 <= args.scene < len(scenes):
        print(f"scene {args.scene} out of range (0..{len(scenes) - 1})", file=sys.stderr)
        return 2
    try:
        stats = run_probe(det, scenes[args.scene], args.instance, args.grid, args.out)
    except (IndexError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    print(f"argmax_distance={stats['argmax_distance']:.3f} rank_correlation={stats['rank_correlation']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsdhead", description="Disentangled detection head on a synthetic shapes corpus.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=500)
    g.add_argument("--val", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=MODES, default="tsd+pc")
    t.add_argument("--mc", type=float, default=0.2, help="classification margin")
    t.add_argument("--mr", type=float, default=0.2, help="localization margin")
    t.add_argument("--gamma", type=float, default=0.1, help="offset scale")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--tsd-only", action="store_true", help="in tsd mode, drop the sibling losses")
    t.add_argument("--classes", type=int, default=3, help="used when the corpus has no meta.json")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--feat-channels", type=int, default=64)
    t.add_argument("--hidden", type=int, default=1024)
    t.add_argument("--rois", type=int, default=128, help="sampled proposals per image")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="mAP across IoU thresholds")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=_eval)

    p = sub.add_parser("probe", help="translation-sensitivity heatmaps for one instance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--instance", type=int, required=True)
    p.add_argument("--grid", type=int, default=21)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
