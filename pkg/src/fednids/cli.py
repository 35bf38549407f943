"""Command line entry point.

Subcommands ``train``, ``privacy`` and ``evade`` run an experiment from a
config file and export its report; ``report`` re-exports a saved run. The
exit code is 0 only when every invariant check recorded by the run passed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .experiments import RUNNERS
from .report import export, load_report

log = logging.getLogger("fednids")

SUBCOMMAND_KIND = {"train": "train", "privacy": "privacy", "evade": "evasion"}
EXIT_OK, EXIT_CHECKS_FAILED, EXIT_BAD_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednids", description="Federated NIDS privacy and evasion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMAND_KIND:
        p = sub.add_parser(name, help=f"run the {SUBCOMMAND_KIND[name]} experiment in --config")
        p.add_argument("--config", required=True, type=Path, help="experiment INI file")
        p.add_argument("--seed", type=int, action="append", help="seed to run; repeat for several (overrides the config)")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--full", action="store_true", help="apply the config's [full] overrides")
    p = sub.add_parser("report", help="re-export a saved run")
    p.add_argument("run", type=Path, help="run directory or report.json")
    p.add_argument("--out", type=Path, help="output directory (default: the run directory)")
    p.add_argument("--format", choices=("csv", "json", "both"), default="both")
    return parser


def _print_checks(report) -> None:
    failed = [c for c in report.checks if not c.passed]
    print(f"{report.name}: {len(report.checks) - len(failed)}/{len(report.checks)} checks passed")
    for c in failed:
        print(f"  FAILED {c.name} {c.detail}".rstrip())


def run_experiment(args) -> int:
    try:
        cfg = load_config(args.config, full=args.full)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_BAD_CONFIG
    kind = SUBCOMMAND_KIND[args.command]
    if cfg.kind != kind:
        print(f"config {args.config} is a {cfg.kind!r} experiment, not {kind!r}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    if args.seed:
        cfg.seeds = list(args.seed)
    out = Path(args.out or cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    report = RUNNERS[kind](cfg, out=out)
    export(report, out)
    _print_checks(report)
    print(f"wrote {out}")
    return EXIT_OK if report.ok else EXIT_CHECKS_FAILED


def run_report(args) -> int:
    try:
        report = load_report(args.run)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read report from {args.run}: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    formats = ("csv", "json") if args.format == "both" else (args.format,)
    out = args.out or (args.run if args.run.is_dir() else args.run.parent)
    export(report, out, formats)
    _print_checks(report)
    return EXIT_OK if report.ok else EXIT_CHECKS_FAILED


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    if args.command == "report":
        return run_report(args)
    return run_experiment(args)


if __name__ == "__main__":
    sys.exit(main())
