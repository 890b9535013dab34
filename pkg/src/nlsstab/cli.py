"""Command line: nlsstab {build-branch, run, probe-linear, probe-omega, report}.

Exit codes: 0 every check passed, 2 a measurement failed, 1 execution error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import harness
from .config import ExperimentConfig, load_config

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

VERBS = {
    "build-branch": harness.build_branch_bundle,
    "run": harness.run_experiment,
    "probe-linear": harness.probe_linear,
    "probe-omega": harness.probe_omega,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlsstab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in list(VERBS) + ["report"]:
        p = sub.add_parser(verb)
        if verb != "report":
            p.add_argument("--config", type=Path, help="experiment YAML (defaults if omitted)")
            p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, required=True, help="bundle directory")
        if verb == "run":
            p.add_argument("--resume", action="store_true", help="continue from the bundle checkpoint")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _print_summary(rep: dict) -> None:
    if rep.get("theorem"):
        print(harness.format_table(rep["theorem"]))
    for key in ("checks", "passes", "probes"):
        if rep.get(key):
            print(json.dumps(rep[key], indent=1, sort_keys=True, default=str))
    print(f"status: {rep.get('status')}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "report":
            rep = harness.report_bundle(args.out)
        else:
            cfg = load_config(args.config) if args.config else ExperimentConfig()
            kw = {"resume": args.resume} if args.verb == "run" else {}
            rep = VERBS[args.verb](cfg, args.out, args.seed, **kw)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except harness.HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _print_summary(rep)
    status = rep.get("status")
    if status == "pass":
        return EXIT_PASS
    if status == "fail":
        return EXIT_FAIL
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
