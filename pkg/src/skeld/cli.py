"""Command line front end: ``skeld run <config.json>`` and ``skeld report <run-dir>``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure (a
``failure.json`` is written into the run directory), 4 infeasible problem,
5 missing run artifacts.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, InfeasibleProblem, NumericalFailure
from .experiments import build_report, run, write_json
from .scenario import Scenario

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INFEASIBLE, EXIT_MISSING = 0, 2, 3, 4, 5

log = logging.getLogger("skeld")


def run_scenario(path, out=None, workers=1):
    """Run the experiment described by the JSON file at ``path``; returns the exit code."""
    try:
        sc = Scenario.load(path)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    out_dir = sc.output_dir(out)
    try:
        run(sc, out_dir, workers)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "failure.json", {"error": type(exc).__name__, "message": str(exc),
                                              "details": {k: _plain(v) for k, v in exc.details.items()}})
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except InfeasibleProblem as exc:
        log.error("infeasible problem: %s", exc)
        return EXIT_INFEASIBLE
    log.info("wrote %s", out_dir)
    return EXIT_OK


def _plain(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return v if isinstance(v, (str, int, list, tuple, type(None))) else repr(v)


def emit_report(run_dir):
    try:
        build_report(run_dir)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="skeld", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (overrides the scenario)")
    p_run.add_argument("--workers", type=int, default=1)
    p_rep = sub.add_parser("report", help="summarize a finished run directory")
    p_rep.add_argument("run_dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="skeld: %(levelname)s: %(message)s")
    if args.command == "run":
        if args.workers < 1:
            log.error("--workers must be >= 1")
            return EXIT_CONFIG
        return run_scenario(args.config, args.out, args.workers)
    return emit_report(args.run_dir)


if __name__ == "__main__":
    sys.exit(main())
