"""
Run the phantom experiment: pseudo labels -> stage 2 -> stage 3 per seed.

Prints per-seed mIoU of the stage-1 pseudo labels and of the final model
against the phantom ground truth, plus the median gain.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

from tomoseg.app import run_phantom_experiment
from tomoseg.config import load_run_config
from tomoseg.logging_config import setup_logging


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="config/phantom_small.yaml")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    cfg = load_run_config(args.config, args.overrides)
    setup_logging(cfg.logging.level, json_output=cfg.logging.json, run_id=cfg.run_id)
    summary = run_phantom_experiment(cfg, seeds=args.seeds)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
