#!/usr/bin/env python3
"""Run the partial-supervision gain benchmark and print the summary table.

Results land in <workdir>/results.json; finished runs are reused, so the
script can be interrupted and restarted. The acceptance suite reads the same
cache instead of retraining.
"""

import argparse
import logging
from pathlib import Path

from veinseg.experiments import GainConfig, format_summary, run_gain_benchmark


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--workdir",
        default=Path(__file__).resolve().parent.parent / "experiments" / "gain",
        type=Path,
    )
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--seeds", default=None, help="comma-separated training seeds")
    parser.add_argument("--force", action="store_true", help="ignore cached summary")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seeds is not None:
        overrides["train_seeds"] = tuple(int(s) for s in args.seeds.split(","))
    cfg = GainConfig(**overrides)
    summary = run_gain_benchmark(args.workdir, cfg, force=args.force)
    print(format_summary(summary))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
