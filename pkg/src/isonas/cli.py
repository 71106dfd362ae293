"""Command-line front end.

Subcommands: analyze-isometry, train-supernet, score, search, retrain,
verify-theorem, report. Common flags: --config, --seed, --out, --stage.
Exit codes: 0 success, 2 config error, 3 stage failure. Log verbosity via
the ISONAS_LOG environment variable (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .pipeline import (PipelineError, run_isometry_analysis, run_pipeline,
                       run_theorem_verification)

COMMAND_STAGES = {
    "train-supernet": ("init", "train"),
    "score": ("score",),
    "search": ("search",),
    "retrain": ("retrain",),
    "report": ("report",),
}


def _common_flags(sub):
    sub.add_argument("--config", help="experiment config (JSON)")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", required=True, help="run directory")
    sub.add_argument("--stage", default=None,
                     help="run exactly this pipeline stage instead of the default set")


def build_parser():
    parser = argparse.ArgumentParser(prog="isonas")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("analyze-isometry", "train-supernet", "score", "search",
                 "retrain", "report"):
        _common_flags(subs.add_parser(name))
    vt = subs.add_parser("verify-theorem")
    _common_flags(vt)
    vt.add_argument("--trials", type=int, default=1000)
    vt.add_argument("--expectation-samples", type=int, default=100_000)
    return parser


def _load(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None):
    level = os.environ.get("ISONAS_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        if args.command == "analyze-isometry":
            rows = run_isometry_analysis(cfg, args.out)
            for r in rows:
                print(f"{r.label:28s} {r.boundary:7s} phi={r.phi:.4f} "
                      f"trace_var={r.trace_var:.4f} {'PASS' if r.passed else 'FAIL'}")
        elif args.command == "verify-theorem":
            report = run_theorem_verification(
                args.out, seed=cfg.seed, trials=args.trials,
                expectation_samples=args.expectation_samples)
            print(f"slope={report.slope:.5f} r2={report.r_squared:.4f} "
                  f"bound_holds={report.bound_holds_heldout}")
        else:
            stages = (args.stage,) if args.stage else COMMAND_STAGES[args.command]
            run_pipeline(cfg, args.out, stages=stages)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except PipelineError as err:
        print(f"pipeline failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
