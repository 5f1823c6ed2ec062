"""Command line entry point: ``robustkit <experiment> --config cfg.json --out dir [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, DatasetError, TrainingDiverged
from .config import EXPERIMENTS
from .experiments import run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustkit", description="Local robustness experiments on small networks.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory for CSVs and the manifest")
        p.add_argument("--seed", type=int, default=None, help="replace the config's seed list with this seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        out = run_experiment(args.config, args.out, args.seed, experiment=args.experiment)
    except (ConfigError, DatasetError, TrainingDiverged) as exc:
        print(f"robustkit {args.experiment}: {exc}", file=sys.stderr)
        return 2
    print(out / "manifest.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
