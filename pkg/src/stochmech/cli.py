"""Command-line front end.

    stochmech run --scenario ground_state --out results/gs [--seed N] [--jobs N] [--strict]
    stochmech verify results/gs
    stochmech list-scenarios
    stochmech export-plots-data results/gs [--out plot_data.csv]

Exit status: 0 when every enabled check passes, 1 when a check fails,
2 for configuration errors, 3 for missing artifacts or runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config, runner
from .errors import ConfigError, MissingArtifact, StochMechError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _summary(report, stream=sys.stdout):
    for c in report["checks"]:
        tol = "" if c["tolerance"] is None else f" (tol {c['tolerance']:g})"
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']:<26} {c['value']:.6g}{tol}",
              file=stream)
    for w in report["warnings"]:
        print(f"WARN  {w}", file=stream)
    print(f"{report['scenario']}: {'all checks passed' if report['passed'] else 'FAILED'}",
          file=stream)


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="stochmech", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write artifacts")
    r.add_argument("--scenario", required=True, help="TOML file or bundled scenario name")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=_u64, help="override the scenario seed")
    r.add_argument("--jobs", type=_positive, help="worker threads for path sampling")
    r.add_argument("--strict", action="store_true", help="treat warnings as failures")

    v = sub.add_parser("verify", help="recompute checks from a results directory")
    v.add_argument("results", help="directory written by `run`")
    v.add_argument("--strict", action="store_true", default=None)
    v.add_argument("--json", action="store_true", help="print the report as JSON")

    sub.add_parser("list-scenarios", help="list bundled scenarios")

    e = sub.add_parser("export-plots-data", help="tidy CSV of densities and histograms")
    e.add_argument("results")
    e.add_argument("--out", help="destination CSV (default <results>/plots/plot_data.csv)")
    e.add_argument("--bins", type=_positive)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-scenarios":
            for name, path in config.bundled().items():
                sc = config.load(path)
                print(f"{name:<22} {sc.kind:<8} {sc.data.get('description', '')}")
            return EXIT_OK
        if args.command == "run":
            sc = config.resolve(args.scenario)
            if args.seed is not None:
                sc = sc.with_seed(args.seed)
            try:
                report = runner.run(sc, args.out, jobs=args.jobs, strict=args.strict)
            except StochMechError as exc:
                if isinstance(exc, ConfigError):
                    raise
                print(f"error: scenario {sc.name}: {type(exc).__name__}: {exc}", file=sys.stderr)
                return EXIT_RUNTIME
            _summary(report)
            return EXIT_OK if report["passed"] else EXIT_FAIL
        if args.command == "verify":
            report = runner.verify(args.results, strict=args.strict)
            if args.json:
                print(json.dumps(report, indent=2, sort_keys=True))
            else:
                _summary(report)
            return EXIT_OK if report["passed"] else EXIT_FAIL
        if args.command == "export-plots-data":
            print(runner.export_plot_data(args.results, args.out, args.bins))
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except StochMechError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
