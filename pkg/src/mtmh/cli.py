"""Command-line runner for reproducible experiments.

Every subcommand builds an :class:`~mtmh.pipeline.Experiment` from a JSON
config plus ``--set`` overrides and runs the stages it needs; stages whose
artifacts already exist under ``--out`` with a matching hash are reused.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .evalharness import MODE_TABLES, TRAINING_MODE, MissingArtifactError, format_report
from .pipeline import Experiment

log = logging.getLogger("mtmh")

LOG_ENV = "MTMH_LOG_LEVEL"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
KNOBS = ("alpha", "w_r")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory")
    common.add_argument("--force", action="store_true", help="rerun stages even if cached")
    common.add_argument("--mode", choices=sorted(MODE_TABLES),
                        help="retrieval mode (default: eval.mode from the config)")

    parser = _Parser(prog="mtmh", description="Multi-head item-to-item retrieval experiments")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-world", parents=[common], help="generate the synthetic world and log")
    sub.add_parser("train-encoder", parents=[common], help="train the content encoder")
    sub.add_parser("gen-pairs", parents=[common], help="build weighted training examples")
    sub.add_parser("train", parents=[common], help="train the model a mode reads")
    sub.add_parser("build-index", parents=[common], help="cluster the tables a mode reads")
    sub.add_parser("evaluate", parents=[common], help="evaluate one mode")
    sub.add_parser("pipeline", parents=[common], help="run every stage for one mode")
    sw = sub.add_parser("sweep", parents=[common], help="sweep alpha or w_r")
    sw.add_argument("--knob", required=True, help="alpha or w_r")
    sw.add_argument("--values", required=True, help="comma-separated values, e.g. 0,25,50")
    return parser


def _config(args) -> ExperimentConfig:
    if args.config is not None and not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides)


def parse_values(raw: str) -> list[float]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise UsageError("--values: empty value list")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"--values: not a comma-separated list of numbers: {raw!r}") from None


def _run(args, ex: Experiment) -> None:
    mode = args.mode or ex.cfg.eval.mode
    cmd = args.command
    if cmd == "gen-world":
        ex.world()
    elif cmd == "train-encoder":
        ex.content()
    elif cmd == "gen-pairs":
        ex.examples()
    elif cmd == "train":
        family = TRAINING_MODE[mode]
        if family is None:
            log.info("mode %s reads no trained model; building content embeddings only", mode)
            ex.content()
        else:
            ex.model(family)
    elif cmd == "build-index":
        ex.context(mode)
    elif cmd in ("evaluate", "pipeline"):
        report = ex.evaluate(mode) if cmd == "evaluate" else ex.pipeline(mode)
        print(format_report(report))
    elif cmd == "sweep":
        result = ex.sweep(args.knob, parse_values(args.values), mode)
        for _, report in result.points:
            print(format_report(report))


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "sweep":
            if args.knob not in KNOBS:
                raise UsageError(f"--knob must be one of {', '.join(KNOBS)}, got {args.knob!r}")
            values = parse_values(args.values)
            if values != sorted(set(values)):
                raise UsageError("--values must be strictly increasing")
        cfg = _config(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ex = Experiment(cfg, args.out, force=args.force)
    try:
        _run(args, ex)
    except (RuntimeError, ValueError, OSError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if ex.events:
            ex.write_run_manifest(" ".join(["mtmh", *(argv if argv is not None else sys.argv[1:])]))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
