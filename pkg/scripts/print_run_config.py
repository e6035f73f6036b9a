import argparse
import json
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

from tomoseg.config import config_to_dict, load_run_config
from tomoseg.validation import validate_run_config


def parse_args():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    cfg = load_run_config(args.config, args.overrides)
    payload = {"config": config_to_dict(cfg), "warnings": validate_run_config(cfg)}
    print(json.dumps(payload, indent=2))


if __name__ == "__main__":
    main()
