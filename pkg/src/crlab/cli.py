"""Command line entry point.

    crlab <suite> --config <path> [--epsilon-ladder a,b,c] [--grid n1,n2]
                  [--seed s] [--out dir]

Exit status: 0 when every gated criterion passes, 1 when one fails, 2 for an
invalid configuration and 3 when the suite itself raises.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigInvalid, CRLabError
from .suites import SUITE_NAMES, load_config, run_suite

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="crlab", description="Run a verification suite and write report.json plus CSV tables.")
    p.add_argument("suite", choices=SUITE_NAMES)
    p.add_argument("--config", help="JSON run configuration (suite defaults when omitted)")
    p.add_argument("--epsilon-ladder", type=_floats, help="strictly decreasing tube widths, e.g. 0.03,0.01,0.003")
    p.add_argument("--grid", type=_ints, help="strictly increasing resolutions, e.g. 12,16,20")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report root directory (default: reports)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"epsilon_ladder": args.epsilon_ladder, "grid": args.grid, "seed": args.seed, "out": args.out}
    try:
        config = load_config(args.suite, args.config, overrides)
    except ConfigInvalid as e:
        print(f"crlab: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status, run_dir, report = run_suite(config)
    except CRLabError as e:
        print(f"crlab: {args.suite} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    for c in report["criteria"]:
        mark = "PASS" if c["passed"] else "FAIL"
        tag = "" if c["gated"] else " (info)"
        print(f"{mark} {c['name']}: {c['value']} {c['relation']} {c['threshold']}{tag}")
    print(f"{'passed' if status == EXIT_OK else 'FAILED'}: {run_dir}")
    return status


if __name__ == "__main__":
    sys.exit(main())
