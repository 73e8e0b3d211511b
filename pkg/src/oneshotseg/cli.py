"""Command-line entry point (``oneshotseg``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as pl

COMMANDS = {
    "phantom-gen": "generate the phantom subjects",
    "train-prnet": "self-supervised PRNet training",
    "propagate": "propagate the support scribble (draws it first if missing)",
    "geos": "GeoS pseudo masks from propagated scribbles",
    "train-seg": "train segmenters with and without PLC, predict the test subjects",
    "evaluate": "Dice report from the artifacts on disk",
    "pipeline": "run every stage end to end",
    "sweep-tau": "propagation precision and pseudo-mask Dice per tau",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oneshotseg", description="One-shot scribble-supervised 3D segmentation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", type=Path, help="JSON config, one section per module")
        s.add_argument("--out", type=Path, required=True, help="workspace directory")
        s.add_argument("--seed", type=int, help="global seed (overrides the config)")
        if name in ("pipeline", "evaluate"):
            s.add_argument("--sweep-dice", action="store_true", help="also run GeoS for every swept tau")
    return p


def _config(args) -> pl.ExperimentConfig:
    if args.config is not None:
        cfg = pl.load_config(args.config)
    else:
        saved = args.out / "config.json"
        cfg = pl.load_config(saved) if saved.exists() and args.command != "pipeline" else pl.ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise pl.ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    return cfg.seeded()


def _run(args, cfg: pl.ExperimentConfig) -> None:
    out = args.out
    cmd = args.command
    if cmd == "pipeline":
        report = pl.run_pipeline(cfg, out, sweep_dice=args.sweep_dice)
        _summary(report)
        return
    if cmd == "sweep-tau":
        for row in pl.run_sweep(cfg, out):
            print(json.dumps({"tau": row["tau"], "precision": row["precision"], "pseudo_dice": row["pseudo_dice"]["mean"]}))
        return
    out.mkdir(parents=True, exist_ok=True)
    pl._write_json(out / "config.json", cfg.to_dict())
    t: dict[str, float] = {}
    if cmd == "phantom-gen":
        pl._run_stage(cmd, pl.stage_phantoms, cfg, out, timings=t)
    elif cmd == "train-prnet":
        pl._run_stage(cmd, pl.stage_train_prnet, cfg, out, timings=t)
    elif cmd == "propagate":
        if not (out / "scribbles" / "support.scribble.json").exists():
            pl._run_stage("scribble", pl.stage_scribble, cfg, out, timings=t)
        pl._run_stage(cmd, pl.stage_propagate, cfg, out, timings=t)
    elif cmd == "geos":
        pl._run_stage(cmd, pl.stage_geos, cfg, out, timings=t)
    elif cmd == "train-seg":
        pl._run_stage(cmd, pl.stage_train_seg, cfg, out, timings=t)
    elif cmd == "evaluate":
        report = pl._run_stage(cmd, pl.stage_evaluate, cfg, out, args.sweep_dice, timings=t)
        pl.write_report(out, report)
        _summary(report)


def _summary(report: pl.MetricsReport) -> None:
    for row in report.ablation_rows():
        print(f"{row['row']:<18} mean Dice {row['mean']:.4f}")
    for key, ok in report.verdicts.items():
        print(f"{key}: {'yes' if ok else 'no'}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
        _run(args, cfg)
    except pl.ConfigError as exc:
        print(f"oneshotseg: error [config]: {exc}", file=sys.stderr)
        return 2
    except pl.StageError as exc:
        print(f"oneshotseg: error {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
