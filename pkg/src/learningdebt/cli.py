"""Command-line entry point.

Subcommands map onto the pipeline stages plus a verification battery:

    learningdebt all       --out results            # full experiment
    learningdebt calibrate --out results
    learningdebt tune      --out results
    learningdebt evaluate  --out results
    learningdebt report    --out results
    learningdebt selftest

Options on every stage: --config PATH (flat key = value file), --seed INT,
--out DIR, --paths-eval INT, --score-unit {q75,median,mean}, --cells FILTER,
--jobs INT.  Command-line options override the config file.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import (
    ExperimentConfig,
    apply_overrides,
    load_config_file,
    run_pipeline,
    run_stage,
    selftest,
)

STAGES = ("calibrate", "tune", "evaluate", "report", "all", "selftest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="learningdebt",
        description="Learning-debt retraining policy simulation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--paths-eval", type=int, help="held-out paths per cell")
        p.add_argument(
            "--score-unit", choices=("q75", "median", "mean"), help="primary score unit"
        )
        p.add_argument(
            "--cells",
            metavar="FILTER",
            help="comma list of family[:prob[:kappa]] tokens, e.g. 'abrupt:0.05'",
        )
        p.add_argument("--jobs", type=int, help="worker processes")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    config = load_config_file(args.config) if args.config else ExperimentConfig()
    return apply_overrides(
        config,
        master_seed=args.seed,
        out_dir=args.out,
        paths_evaluation=args.paths_eval,
        score_unit=args.score_unit,
        cells_filter=args.cells,
        jobs=args.jobs,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        report = selftest()
        for line in report.lines():
            print(line)
        return 0 if report.passed else 1
    config = _config_from_args(args)
    if args.command == "all":
        return run_pipeline(config)
    run_stage(config, args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
