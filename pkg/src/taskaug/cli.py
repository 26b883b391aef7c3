"""Command-line entry point.

Every subcommand operates on one run directory: `pipeline` executes all
stages; the stage subcommands run one step, expecting their predecessors'
artifacts to be present. Exit status is 0 on success and 1 on any failure,
with partial artifacts left in place.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from taskaug import pipeline as pl
from taskaug.config import config_hash, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskaug",
        description="Utility-driven synthetic data augmentation pipeline.")
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    parser.add_argument("--out", default="runs/run", help="run directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("make-task", "draw the task splits and few-shot subset"),
        ("warmup", "generate the meta-training warmup synthetic set"),
        ("todv", "meta-train the utility weight network"),
        ("mlco", "preference-tune the generator"),
        ("ilpo", "instance-level generation (prompts + noise refinement)"),
        ("generate", "alias of ilpo: produce the synthetic datasets"),
        ("train", "train downstream classifiers per regime"),
        ("eval", "alias of train: training and evaluation run together"),
        ("analyze", "weight/influence/diversity analysis"),
        ("report", "render the report from existing metrics"),
        ("pipeline", "run every stage in order"),
        ("train-generator", "train the base denoiser and class tokens"),
        ("scaling", "accuracy-vs-budget experiment (budgets 1,3,5 by default)"),
        ("reusability", "cross-architecture reuse experiment"),
    ]:
        p = sub.add_parser(name, help=help_text)
        if name == "scaling":
            p.add_argument("--budgets", default="1,3,5",
                           help="comma-separated budget multipliers")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        run = pl.init_run(cfg, args.out)
        if args.config:
            snapshot = open(args.config, encoding="utf-8").read()
            (run.root / "config.txt").write_text(snapshot, encoding="utf-8")
        dispatch = {
            "make-task": lambda: pl.stage_task(cfg, run),
            "train-generator": lambda: pl.stage_generator(cfg, run),
            "warmup": lambda: pl.stage_warmup(cfg, run),
            "todv": lambda: pl.stage_todv(cfg, run),
            "mlco": lambda: pl.stage_mlco(cfg, run),
            "ilpo": lambda: pl.stage_generate(cfg, run),
            "generate": lambda: pl.stage_generate(cfg, run),
            "train": lambda: pl.stage_train_eval(cfg, run),
            "eval": lambda: pl.stage_train_eval(cfg, run),
            "analyze": lambda: pl.stage_analyze(cfg, run),
            "report": lambda: pl.emit_report(run),
            "pipeline": lambda: pl.run_pipeline(cfg, args.out),
            "scaling": lambda: pl.scaling_experiment(
                cfg, [float(b) for b in args.budgets.split(",")], args.out),
            "reusability": lambda: pl.reusability_experiment(cfg, args.out),
        }
        dispatch[args.command]()
        print(f"{args.command}: ok (run={args.out}, config_hash={config_hash(cfg)})")
        return 0
    except Exception as e:  # noqa: BLE001 - single CLI failure boundary
        traceback.print_exc()
        print(f"{args.command}: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
