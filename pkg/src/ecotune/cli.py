from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .backend import BackendError
from .driver import (
    RunSpec,
    SpecError,
    Tuner,
    format_summary,
    log_summary,
    resume,
    run,
)
from .evaluator import TrialError
from .metrics import CheckerError
from .space import Configuration, check_config, default_space

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_NO_VALID = 3
EXIT_BACKEND = 4


def _tune(args) -> int:
    spec = RunSpec.from_file(args.run_spec, seed=args.seed)
    if args.resume:
        report = resume(args.resume, spec)
    else:
        log = args.log
        if log and Path(log).exists() and Path(log).stat().st_size:
            raise SpecError(f"log {log} already exists; pass it with --resume to continue")
        report = run(spec, log)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.succeeded else EXIT_NO_VALID


def _eval(args) -> int:
    spec = RunSpec.from_file(args.run_spec)
    raw = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
    try:
        config = Configuration.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise SpecError(f"invalid configuration: {e}") from e
    problems = config.problems()
    if problems:
        raise SpecError("invalid configuration: " + "; ".join(problems))
    outside = check_config(config, spec.space)
    if outside:
        logging.getLogger(__name__).warning("configuration lies outside the search space: %s", outside)
    result = Tuner(spec).evaluate(config, 0)
    print(json.dumps({"config": config.to_dict(), "result": result.to_dict()}, indent=2))
    return EXIT_OK if result.valid else EXIT_NO_VALID


def _report(args) -> int:
    summary = log_summary(args.log)
    if args.format == "records":
        print(json.dumps(summary, indent=2))
    else:
        print(format_summary(summary))
    return EXIT_OK


def _space(args) -> int:
    print(json.dumps(default_space().to_decl(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecotune",
        description="Budget-constrained hyperparameter tuning for text-generation inference.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="run (or resume) an optimization")
    p.add_argument("--run-spec", required=True)
    p.add_argument("--resume", metavar="LOG")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="trial log to write (JSON lines)")
    p.set_defaults(func=_tune)

    p = sub.add_parser("eval", help="evaluate one fixed configuration")
    p.add_argument("--run-spec", required=True)
    p.add_argument("--config", required=True, help="YAML/JSON configuration file")
    p.set_defaults(func=_eval)

    p = sub.add_parser("report", help="summarize a trial log")
    p.add_argument("--log", required=True)
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.set_defaults(func=_report)

    p = sub.add_parser("space", help="print a search-space declaration")
    p.add_argument("--default", action="store_true", required=True)
    p.set_defaults(func=_space)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SpecError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SPEC
    except (TrialError, BackendError, CheckerError) as e:
        print(f"error: {e} (the trial log is resumable)", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
