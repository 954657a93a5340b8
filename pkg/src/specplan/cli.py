"""Command-line entry points: run, calibrate, correlate, oracle-check."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specplan",
        description="Budget-aware draft-tree planning experiments over simulated decoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config and write raw + summary CSVs")
    run.add_argument("--config", type=Path, required=True, help="experiment config file")
    run.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
    run.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    run.add_argument("--workers", type=int, default=1, help="parallel cell workers")

    cal = sub.add_parser("calibrate", help="fit the latency calibration from a measured trace")
    cal.add_argument("--profile", type=Path, required=True, help="hardware profile file")
    cal.add_argument("--trace", type=Path, required=True, help="latency trace (s,c,observed_seconds)")
    cal.add_argument("--out", type=Path, default=None, help="directory for the fit report")

    cor = sub.add_parser("correlate", help="surrogate/accepted-length correlation from raw CSVs")
    cor.add_argument("raw", type=Path, nargs="+", help="raw cycle CSV files")

    chk = sub.add_parser("oracle-check", help="run the oracle bridge suite and timing report")
    chk.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = harness.load_experiment_config(args.config)
            if args.seed is not None:
                from dataclasses import replace

                cfg = replace(cfg, seed=args.seed)
            cell_paths, summary_path = harness.run_experiment(
                cfg, out_dir=args.out, workers=args.workers
            )
            print(f"wrote {len(cell_paths)} raw cell files and {summary_path}")
        elif args.command == "calibrate":
            report = harness.calibrate(args.profile, args.trace)
            text = report.render()
            if args.out is not None:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / "calibration.txt").write_text(text)
            print(text, end="")
        elif args.command == "correlate":
            bodies = [path.read_text() for path in args.raw]
            pearson, spearman = harness.correlate(bodies)
            print(f"pearson = {pearson:.4f}")
            print(f"spearman = {spearman:.4f}")
        elif args.command == "oracle-check":
            result = harness.oracle_check(seed=args.seed)
            print(result.render(), end="")
            if not result.passed:
                return 1
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
