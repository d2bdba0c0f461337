"""Command-line interface.

Subcommands mirror the pipeline stages:

    mcseg generate-data | train-baseline | train-candidates | select |
          train-combiner | evaluate --model {baseline,ensemble} | report

Shared flags: --config PATH (JSON), --set key=value (repeatable, dotted
paths), --seed N (master seed), --threads N, --out DIR.

Exit codes: 0 success, 2 config error, 3 stage-order error, 4 evaluation
degeneracy (e.g. a perfect model leaves the incorrect pool too small for the
divergence estimator), 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .errors import (
    ConfigError,
    DegeneratePoolError,
    EvaluationError,
    McsegError,
    StageOrderError,
)
from .pipeline import MODEL_NAMES, Pipeline
from .runconfig import load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE_ORDER = 3
EXIT_DEGENERATE = 4
EXIT_OTHER = 1

STAGES = (
    "generate-data",
    "train-baseline",
    "train-candidates",
    "select",
    "train-combiner",
    "evaluate",
    "report",
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcseg",
        description="MC-dropout ensemble segmentation pipeline on synthetic vessel phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry by dotted path (repeatable)",
        )
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--threads", type=int, default=None, help="worker count")
        p.add_argument("--out", default=None, help="run output directory")
        if name == "evaluate":
            p.add_argument("--model", choices=MODEL_NAMES, required=True)
    return parser


def _resolve_config(args: argparse.Namespace):
    config = load_config(args.config, args.overrides)
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
    if args.threads is not None:
        config = dataclasses.replace(config, threads=args.threads)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    config.validate()
    return config


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        pipeline = Pipeline(config)
        if args.command == "generate-data":
            pipeline.generate_data()
        elif args.command == "train-baseline":
            pipeline.train_baseline()
        elif args.command == "train-candidates":
            pipeline.train_candidates_stage()
        elif args.command == "select":
            pipeline.select()
        elif args.command == "train-combiner":
            pipeline.train_combiner_stage()
        elif args.command == "evaluate":
            try:
                pipeline.evaluate(args.model)
            except (DegeneratePoolError, EvaluationError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_DEGENERATE
        elif args.command == "report":
            pipeline.report()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_ORDER
    except McsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
