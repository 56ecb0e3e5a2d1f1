"""``scer`` command-line entry point.

Exit codes: 0 success, 2 config or input-schema error, 3 numerical failure,
4 a theory check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .runs import (
    NumericalFailure,
    SchemaError,
    cmd_generate,
    cmd_report,
    cmd_sweep,
    cmd_theory,
    cmd_train,
    resolve_jobs,
    write_manifest,
)
from .trainer import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("scer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scer", description="Spurious-correlation-aware embedding regularization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write dataset CSVs and manifests",
        "train": "train one or more seeds",
        "theory": "closed-form vs Monte Carlo checks",
        "sweep": "grid over lambdas, rho, norm mode, ...",
        "report": "scatter data, rank correlations and figures from finished runs",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="JSON config with a matching 'command'")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed(s)")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (SCER_JOBS wins)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    if doc["command"] != args.command:
        raise ConfigError("command", f"config is for {doc['command']!r}, invoked as {args.command!r}")
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed", "must be nonnegative")
    jobs = resolve_jobs(args.jobs)
    out = args.out
    if args.command == "generate":
        written = cmd_generate(doc, out, args.seed)
        log.info("wrote %s", ", ".join(f"{k} ({v} rows)" for k, v in written.items()))
    elif args.command == "train":
        rows = cmd_train(doc, out, args.seed, jobs)
        for r in rows:
            log.info("seed %s: test worst acc %.4f", r["seed"], r.get("test_worst_acc", float("nan")))
    elif args.command == "sweep":
        rows, aggs = cmd_sweep(doc, out, args.seed, jobs)
        log.info("%d runs over %d grid points", len(rows), len(aggs))
    elif args.command == "theory":
        report = cmd_theory(doc, out, args.seed)
        write_manifest(out, args.command, args.config, doc, args.seed)
        for c in report["checks"]:
            log.info("%-28s %s", c["name"], "pass" if c["pass"] else "FAIL")
        return EXIT_OK if report["all_pass"] else EXIT_CHECK
    else:
        summary = cmd_report(doc, out, args.seed)
        for key, rho in summary["spearman_vs_worst_acc"].items():
            log.info("spearman(%s, worst_acc) = %s", key, "n/a" if rho is None else f"{rho:+.3f}")
    write_manifest(out, args.command, args.config, doc, args.seed)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except (ConfigError, SchemaError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (NumericalFailure, DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
