"""
Command-line entry point.

Usage:
    python -m tomoseg <command> --config run.yaml [--set key.path=value ...]

Commands:
- phantom      synthesize a volume + ground truth
- pseudolabel  stage 1 clustering
- train        --stage 2 | --stage 3
- eval         metrics (+ overlays) on labeled slices
- gradcam      heatmap for one slice and class
- confusion    cluster -> class table

Exit codes: 0 ok, 2 config error, 3 input/data error, 4 runtime failure.
"""

from __future__ import annotations

from typing import Sequence
import argparse
import json
import logging
import sys

from .app import run_confusion, run_eval, run_gradcam, run_phantom, run_pseudolabel, run_train
from .config import RunConfig, load_run_config
from .errors import TomosegError
from .gradcam import DEFAULT_LAYER
from .logging_config import setup_logging
from .pseudolabel import cluster_report

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tomoseg", description="Unsupervised tomography segmentation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Run config YAML (defaults when omitted).")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key, ex: --set train.delta=0.6 (repeatable).",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="Write a synthetic volume and its ground truth.")
    sub.add_parser("pseudolabel", parents=[common], help="Stage 1: clustering pseudo labels.")

    train = sub.add_parser("train", parents=[common], help="Stage 2 or stage 3 training.")
    train.add_argument("--stage", type=int, choices=(2, 3), required=True)
    train.add_argument("--checkpoint", default=None, help="Stage-2 checkpoint for stage 3.")

    evaluate = sub.add_parser("eval", parents=[common], help="Accuracy/mIoU on labeled slices.")
    evaluate.add_argument("--checkpoint", default=None)
    evaluate.add_argument("--labels", default=None, help="Ground-truth label volume (raw + sidecar).")
    evaluate.add_argument("--predictions", default=None, help="Score a saved label volume instead of a model.")

    cam = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmap for one slice/class.")
    cam.add_argument("--checkpoint", default=None)
    cam.add_argument("--slice", dest="slice_index", type=int, required=True)
    cam.add_argument("--class", dest="target_class", type=int, required=True)
    cam.add_argument("--layer", default=DEFAULT_LAYER)

    confusion = sub.add_parser("confusion", parents=[common], help="Cluster -> class confusion table.")
    confusion.add_argument("--checkpoint", default=None)
    confusion.add_argument("--keep-background", action="store_true", help="Keep the K0 row.")
    return parser


def _dispatch(args: argparse.Namespace, cfg: RunConfig) -> None:
    if args.command == "phantom":
        volume_path, truth_path = run_phantom(cfg)
        print(json.dumps({"volume": str(volume_path), "ground_truth": str(truth_path)}))
    elif args.command == "pseudolabel":
        _, model = run_pseudolabel(cfg)
        print(json.dumps(cluster_report(model), indent=2))
    elif args.command == "train":
        result = run_train(cfg, args.stage, args.checkpoint)
        print(json.dumps({"checkpoint": str(result.checkpoint), "epochs": len(result.records)}))
    elif args.command == "eval":
        report = run_eval(cfg, args.checkpoint, labels=args.labels, predictions=args.predictions)
        print(json.dumps(report.to_dict(), indent=2))
    elif args.command == "gradcam":
        outputs = run_gradcam(
            cfg,
            args.slice_index,
            args.target_class,
            checkpoint=args.checkpoint,
            layer=args.layer,
        )
        print(json.dumps({key: str(value) for key, value in outputs.items()}))
    elif args.command == "confusion":
        matrix = run_confusion(cfg, args.checkpoint, exclude_background=not args.keep_background)
        print(matrix.format_table())


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.overrides)
        log_file = None
        if cfg.logging.to_file:
            cfg.run_dir.mkdir(parents=True, exist_ok=True)
            log_file = cfg.run_dir / "run.log"
        setup_logging(cfg.logging.level, json_output=cfg.logging.json, run_id=cfg.run_id, log_file=log_file)
        _dispatch(args, cfg)
    except TomosegError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        logger.exception("Unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0
