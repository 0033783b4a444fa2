"""Command-line driver: run scenario files and write reports.

Exit codes: 0 when every check passes, 1 on check failures or task
errors, 2 on usage and schema problems.
"""

import argparse
import sys

from .errors import ConormalError, SchemaError
from .scenario import load_scenario, run_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conormal",
        description="Run a scenario file through the conormal calculus and "
                    "write a deterministic report.")
    parser.add_argument("--scenario", required=True,
                        help="path to a scenario JSON file")
    parser.add_argument("--out", default=".",
                        help="output directory for reports and artifacts")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    parser.add_argument("--hbar", default=None,
                        help="comma-separated list overriding the 'hbar' "
                             "parameter, e.g. 0.1,0.05,0.025")
    parser.add_argument("--grid", type=int, default=None,
                        help="override the 'grid' parameter (nodes per axis)")
    parser.add_argument("--quad-order", type=int, default=None,
                        help="override the 'quad_order' parameter")
    parser.add_argument("--tol", action="append", default=[],
                        metavar="NAME=VALUE",
                        help="override a named tolerance (repeatable)")
    parser.add_argument("--format", choices=("json", "csv"), default="json",
                        help="report serialization format")
    return parser


def _parse_overrides(args) -> tuple:
    params = {}
    if args.hbar is not None:
        try:
            params["hbar"] = [float(v) for v in args.hbar.split(",") if v]
        except ValueError:
            raise SchemaError(f"--hbar: could not parse '{args.hbar}'")
        if not params["hbar"]:
            raise SchemaError("--hbar: empty list")
    if args.grid is not None:
        params["grid"] = args.grid
    if args.quad_order is not None:
        params["quad_order"] = args.quad_order
    tolerances = {}
    for item in args.tol:
        name, sep, value = item.partition("=")
        if not sep:
            raise SchemaError(f"--tol: expected NAME=VALUE, got '{item}'")
        try:
            tolerances[name] = float(value)
        except ValueError:
            raise SchemaError(f"--tol {name}: bad value '{value}'")
    return params, tolerances


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        params, tolerances = _parse_overrides(args)
        doc = load_scenario(args.scenario)
        code, _ = run_scenario(doc, args.scenario, args.out, seed=args.seed,
                               params=params or None,
                               tolerances=tolerances or None,
                               fmt=args.format)
        return code
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except ConormalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
