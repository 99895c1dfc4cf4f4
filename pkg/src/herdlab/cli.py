"""Command-line entry point ``herdlab``.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver failure,
4 comparison failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import SCENARIOS, ConfigError, apply_overrides, from_dict, read_raw
from .io import SchemaMismatch, compare_tables
from .scenarios import SOLVER_ERRORS, run_scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_COMPARE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="herdlab", description=(
        "Steady states, bifurcations and entropy-decay simulations for a two-species "
        "cross-diffusion system on an interval."))
    parser.add_argument("--version", action="version", version=f"herdlab {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (repeat for debug output)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SCENARIOS:
        p = sub.add_parser(name, help=f"run the {name} scenario")
        p.add_argument("-c", "--config", type=Path, help="TOML or JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config value, e.g. params.delta=-3")
        p.add_argument("-o", "--output-dir", type=Path, help="directory for artifacts")
    p = sub.add_parser("compare", help="compare a produced CSV table against a reference")
    p.add_argument("produced", type=Path)
    p.add_argument("reference", type=Path)
    p.add_argument("--atol", type=float, default=0.0)
    p.add_argument("--rtol", type=float, default=0.0)
    return parser


def _run(args: argparse.Namespace) -> int:
    raw = read_raw(args.config)
    if "scenario" in raw and raw["scenario"] != args.command:
        raise ConfigError(f"config scenario {raw['scenario']!r} does not match command "
                          f"{args.command!r}")
    raw["scenario"] = args.command
    raw = apply_overrides(raw, args.overrides)
    cfg = from_dict(raw)
    result = run_scenario(cfg, args.output_dir)
    print(f"{args.command}: ok; manifest at {result.manifest_path}")
    return EXIT_OK


def _compare(args: argparse.Namespace) -> int:
    report = compare_tables(args.produced, args.reference, args.atol, args.rtol)
    print(report.describe())
    return EXIT_OK if report.passed else EXIT_COMPARE


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return _compare(args)
        return _run(args)
    except SchemaMismatch as exc:
        print(f"comparison failed: {exc}", file=sys.stderr)
        return EXIT_COMPARE
    except SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, ValueError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
