"""Command line: ``python3 -m clad {run,resume,tables,plots,validate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import (
    DATA_ROOT_ENV,
    ExperimentConfig,
    ExperimentError,
    emit_plot_data,
    emit_tables,
    load_bundles,
    load_config,
    resume_experiment,
    run_experiment,
)


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.3f}"


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, epochs=args.epochs, out=args.out)


def cmd_validate(args) -> int:
    cfg = _load(args)
    problems = cfg.validate()
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return 2
    for c in cfg.strategy_configs():
        print(f"ok  {c.label}  seed={c.seed}  epochs={c.epochs}  hash={c.config_hash()}")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    problems = cfg.validate()
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return 2
    out = Path(cfg.out or "runs")
    bundles = run_experiment(cfg, out, parallel=args.parallel)
    emit_tables(bundles, out / "tables", "markdown")
    emit_plot_data(bundles, out / "plots")
    for b in bundles:
        s = b.summaries()
        print(f"{b.cell.label}  " + "  ".join(f"{k}={_fmt(s[k])}" for k in ("S_T", "F_T", "FID_T")))
    return 0


def cmd_resume(args) -> int:
    bundles = resume_experiment(args.out, parallel=args.parallel)
    emit_tables(bundles, Path(args.out) / "tables", "markdown")
    emit_plot_data(bundles, Path(args.out) / "plots")
    print(f"{len(bundles)} cells complete in {args.out}")
    return 0


def cmd_tables(args) -> int:
    bundles = load_bundles(args.out)
    for path in emit_tables(bundles, Path(args.out) / "tables", args.format):
        print(path.read_text())
    return 0


def cmd_plots(args) -> int:
    bundles = load_bundles(args.out)
    for path in emit_plot_data(bundles, Path(args.out) / "plots"):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clad",
        description="Continual-learning anomaly detection experiments.",
        epilog=f"Set ${DATA_ROOT_ENV} to override the MVTec root named in a config.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int, choices=(30, 50))

    p = sub.add_parser("run", help="train every grid cell, resuming finished work")
    with_config(p)
    p.add_argument("--parallel", type=int, default=1, metavar="K")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run from its output directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--parallel", type=int, default=1, metavar="K")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("tables", help="summary tables from finished bundles")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("plots", help="per-task series as CSV")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("validate", help="check a config without training")
    with_config(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ExperimentError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
