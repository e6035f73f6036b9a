"""
Runtime assembly helpers.

Purpose:
- Keep wiring logic (config -> volume -> stage function -> files) in one place.
- Make it easy to trace how one YAML entry ends up in a run directory.

Logic flow:
1) start_run() creates output_dir/run_id and writes resolved.yaml there.
2) prepare_volume() loads (or synthesizes) and normalizes the volume.
3) run_<command>() calls the stage function and writes its artifacts.

Run directory layout:
- resolved.yaml, metrics.jsonl, run.log
- phantom/volume.raw, phantom/ground_truth.raw (+ .yaml sidecars)
- pseudo_labels.raw, cluster_report.json, pseudo_vs_truth.json
- stage2.pt, stage2_epoch{N}.pt, stage3.pt
- eval_report.json, overlays/slice_{z}.png, predicted.raw
- gradcam/slice_{z}_class_{c}.png (+ _overlay.png)
- confusion.json
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any
import logging

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, write_resolved_config
from .errors import CheckpointError, ConfigError
from .gradcam import DEFAULT_LAYER, grad_cam, heatmap_image, label_overlay, save_png
from .metrics import (
    ClusterClassMatrix,
    MetricReport,
    cluster_class_confusion,
    matched_miou,
    miou,
    occupied_classes,
    write_report,
)
from .phantom import corruption_report, generate_phantom, generate_phantom_regions, save_phantom
from .pseudolabel import ClusterModel, generate_pseudolabels, write_cluster_report
from .segnet import build_model
from .selftrain import TrainResult, predict_volume, train_stage2, train_stage3
from .validation import validate_run_config
from .volume_io import (
    FormatSpec,
    LabelVolume,
    Volume,
    extract_stack,
    load_labels,
    load_volume,
    normalize,
    save_labels,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreparedVolume:
    volume: Volume
    ground_truth: LabelVolume | None


def start_run(cfg: RunConfig) -> Path:
    """
    Create the run directory, log config warnings and write resolved.yaml.
    """

    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    for warning in validate_run_config(cfg):
        logger.warning("Config: %s", warning)
    write_resolved_config(cfg, run_dir / "resolved.yaml")
    return run_dir


def prepare_volume(cfg: RunConfig) -> PreparedVolume:
    """
    Load (or generate) the volume and scale it to [0, 1].
    """

    truth: LabelVolume | None = None
    if cfg.io.format == "phantom":
        raw, truth = generate_phantom(cfg.phantom)
    else:
        raw = load_volume(cfg.io.path, FormatSpec(kind=cfg.io.format))
    if cfg.io.ground_truth:
        truth = load_labels(cfg.io.ground_truth)
        if truth.shape != raw.shape:
            raise ConfigError(f"io.ground_truth shape {truth.shape} does not match volume {raw.shape}.")
    volume = normalize(raw, cfg.io.normalize, p_lo=cfg.io.p_lo, p_hi=cfg.io.p_hi)
    return PreparedVolume(volume=volume, ground_truth=truth)


def run_phantom(cfg: RunConfig) -> tuple[Path, Path]:
    run_dir = start_run(cfg)
    volume, truth = generate_phantom(cfg.phantom)
    paths = save_phantom(run_dir / "phantom", volume, truth)
    logger.info("Phantom written to %s", paths[0].parent)
    return paths


def _pseudo_scores(prepared: PreparedVolume, labels: LabelVolume, cfg: RunConfig) -> MetricReport | None:
    if prepared.ground_truth is None:
        return None
    regions = generate_phantom_regions(cfg.phantom) if cfg.io.format == "phantom" else None
    return corruption_report(prepared.volume, prepared.ground_truth, labels, regions, cfg.eval.ignore_classes)


def run_pseudolabel(cfg: RunConfig) -> tuple[LabelVolume, ClusterModel]:
    """
    Stage 1: cluster voxel values and write labels plus the clustering report.
    """

    run_dir = start_run(cfg)
    prepared = prepare_volume(cfg)
    pl = cfg.pseudolabel
    labels, model = generate_pseudolabels(
        prepared.volume,
        pl.method,
        pl.num_classes,
        cfg.seed,
        sample_size=pl.sample_size,
        max_iter=pl.max_iter,
        tol=pl.tol,
        n_init=pl.n_init,
        num_bins=pl.num_bins,
    )
    save_labels(run_dir / "pseudo_labels.raw", labels)
    write_cluster_report(run_dir / "cluster_report.json", model)
    report = _pseudo_scores(prepared, labels, cfg)
    if report is not None:
        write_report(run_dir / "pseudo_vs_truth.json", report)
        logger.info("Pseudo labels vs truth: accuracy=%.4f miou=%.4f", report.pixel_accuracy, report.miou)
    return labels, model


def _pseudo_labels(cfg: RunConfig, prepared: PreparedVolume) -> LabelVolume:
    candidates = [Path(cfg.io.pseudo_labels)] if cfg.io.pseudo_labels else [cfg.run_dir / "pseudo_labels.raw"]
    for path in candidates:
        if path.exists():
            labels = load_labels(path)
            if labels.shape != prepared.volume.shape:
                raise ConfigError(f"Pseudo labels '{path}' shape {labels.shape} does not match the volume.")
            return labels
    if cfg.io.pseudo_labels:
        raise ConfigError(f"io.pseudo_labels '{cfg.io.pseudo_labels}' not found.")
    logger.info("No pseudo labels in %s; running stage 1 first.", cfg.run_dir)
    labels, _ = run_pseudolabel(cfg)
    return labels


def default_checkpoint(cfg: RunConfig) -> Path:
    for name in ("stage3.pt", "stage2.pt"):
        path = cfg.run_dir / name
        if path.exists():
            return path
    raise CheckpointError(f"No stage2.pt or stage3.pt in {cfg.run_dir}; train first or pass --checkpoint.")


def run_train(cfg: RunConfig, stage: int, checkpoint: str | Path | None = None) -> TrainResult:
    """
    Stage 2 trains from scratch on pseudo labels; stage 3 starts from a
    stage-2 checkpoint (default: run_dir/stage2.pt).
    """

    if stage not in (2, 3):
        raise ConfigError(f"stage must be 2 or 3, got {stage}.")
    run_dir = start_run(cfg)
    prepared = prepare_volume(cfg)

    if stage == 2:
        pseudo = _pseudo_labels(cfg, prepared)
        model = build_model(cfg.model, seed=cfg.seed)
        return train_stage2(model, prepared.volume, pseudo, cfg, run_dir=run_dir, ground_truth=prepared.ground_truth)

    source = Path(checkpoint) if checkpoint else run_dir / "stage2.pt"
    if not source.exists():
        raise CheckpointError(f"Stage 3 needs a stage-2 checkpoint; '{source}' not found. Run train --stage 2 first.")
    loaded = load_checkpoint(source)
    pseudo = _pseudo_labels(cfg, prepared) if cfg.train.stage3_pseudo_weight > 0 else None
    return train_stage3(
        loaded,
        prepared.volume,
        cfg,
        run_dir=run_dir,
        pseudo=pseudo,
        ground_truth=prepared.ground_truth,
    )


def _score(pred: LabelVolume, truth: np.ndarray, num_truth: int, ignore: tuple[int, ...]) -> MetricReport:
    if pred.num_classes != num_truth:
        return matched_miou(pred.labels, truth, pred.num_classes, num_truth, ignore)
    return miou(pred.labels, truth, ignore, num_classes=num_truth)


def run_eval(
    cfg: RunConfig,
    checkpoint: str | Path | None = None,
    *,
    labels: str | Path | None = None,
    predictions: str | Path | None = None,
) -> MetricReport:
    """
    Score a checkpoint (or a saved prediction volume) against labeled slices.

    labels overrides io.ground_truth; with neither, phantom runs use their own
    ground truth.
    """

    run_dir = start_run(cfg)
    prepared = prepare_volume(cfg)
    truth = load_labels(labels) if labels else prepared.ground_truth
    if truth is None:
        raise ConfigError("Evaluation needs labels: pass --labels or set io.ground_truth.")
    slices = list(cfg.eval.slices) if cfg.eval.slices is not None else list(range(truth.shape[0]))

    if predictions is not None:
        stored = load_labels(predictions)
        pred = LabelVolume(labels=stored.labels[slices], num_classes=stored.num_classes, provenance=stored.provenance)
    else:
        model = load_checkpoint(checkpoint or default_checkpoint(cfg)).model
        pred = predict_volume(
            model,
            prepared.volume,
            cfg.train.num_slices,
            slices=slices,
            batch_size=cfg.eval.batch_size,
        )
        save_labels(run_dir / "predicted.raw", pred)

    report = _score(pred, truth.labels[slices], truth.num_classes, tuple(cfg.eval.ignore_classes))
    write_report(run_dir / "eval_report.json", report)

    if cfg.eval.overlays:
        for row, z in enumerate(slices):
            image = prepared.volume.data[z]
            save_png(run_dir / "overlays" / f"slice_{z}.png", label_overlay(pred.labels[row], image))
    logger.info("Eval accuracy=%.4f miou=%.4f on %d slices", report.pixel_accuracy, report.miou, len(slices))
    return report


def run_gradcam(
    cfg: RunConfig,
    slice_index: int,
    target_class: int,
    *,
    checkpoint: str | Path | None = None,
    layer: str = DEFAULT_LAYER,
) -> dict[str, Any]:
    run_dir = start_run(cfg)
    prepared = prepare_volume(cfg)
    if not 0 <= slice_index < prepared.volume.shape[0]:
        raise ConfigError(f"Slice {slice_index} outside volume depth {prepared.volume.shape[0]}.")
    model = load_checkpoint(checkpoint or default_checkpoint(cfg)).model
    stack = extract_stack(prepared.volume, slice_index, cfg.train.num_slices)
    cam = grad_cam(model, stack, target_class, layer)

    base = run_dir / "gradcam" / f"slice_{slice_index}_class_{target_class}"
    heat_path = save_png(base.with_suffix(".png"), heatmap_image(cam))
    gray = prepared.volume.data[slice_index]
    blend = np.stack([gray, gray, gray], axis=-1) * 0.5
    blend[..., 0] += 0.5 * cam.values
    overlay_path = save_png(
        base.with_name(base.name + "_overlay.png"),
        np.clip(np.rint(blend * 255.0), 0, 255).astype(np.uint8),
    )
    return {
        "heatmap": heat_path,
        "overlay": overlay_path,
        "empty": cam.empty,
        "layer": cam.layer,
        "target_class": cam.target_class,
    }


def run_confusion(
    cfg: RunConfig,
    checkpoint: str | Path | None = None,
    *,
    exclude_background: bool = True,
) -> ClusterClassMatrix:
    """
    Cluster -> class table between stage-1 pseudo labels and the model's
    final labels over the whole volume.
    """

    run_dir = start_run(cfg)
    prepared = prepare_volume(cfg)
    pseudo = _pseudo_labels(cfg, prepared)
    model = load_checkpoint(checkpoint or default_checkpoint(cfg)).model
    final = predict_volume(model, prepared.volume, cfg.train.num_slices, batch_size=cfg.eval.batch_size)
    matrix = cluster_class_confusion(pseudo, final, exclude_background)
    write_report(run_dir / "confusion.json", matrix)
    return matrix


def run_phantom_experiment(cfg: RunConfig, seeds: list[int] | tuple[int, ...] = (0, 1, 2)) -> dict[str, Any]:
    """
    Phantom -> pseudo labels -> stage 2 -> stage 3 for several seeds.

    Each seed reseeds both the phantom and training. Class sets of different
    sizes (ex: K=6 pseudo labels vs 3 true classes) are compared after optimal
    matching. Returns per-seed scores and the median mIoU gain of the teacher
    over the pseudo labels.
    """

    if cfg.io.format != "phantom":
        raise ConfigError("run_phantom_experiment needs io.format=phantom.")
    runs: list[dict[str, Any]] = []
    for seed in seeds:
        seeded = replace(
            cfg,
            seed=int(seed),
            run_id=f"{cfg.run_id}_seed{seed}",
            phantom=replace(cfg.phantom, seed=int(seed)),
        )
        run_dir = start_run(seeded)
        prepared = prepare_volume(seeded)
        truth = prepared.ground_truth
        pl = seeded.pseudolabel
        pseudo, _ = generate_pseudolabels(
            prepared.volume,
            pl.method,
            pl.num_classes,
            seeded.seed,
            sample_size=pl.sample_size,
            max_iter=pl.max_iter,
            tol=pl.tol,
            n_init=pl.n_init,
            num_bins=pl.num_bins,
        )
        ignore = tuple(seeded.eval.ignore_classes)
        pseudo_report = _score(pseudo, truth.labels, truth.num_classes, ignore)

        model = build_model(seeded.model, seed=seeded.seed)
        stage2 = train_stage2(model, prepared.volume, pseudo, seeded, run_dir=run_dir, ground_truth=None)
        stage3 = train_stage3(stage2.model, prepared.volume, seeded, run_dir=run_dir, pseudo=pseudo)
        final = predict_volume(stage3.model, prepared.volume, seeded.train.num_slices, batch_size=seeded.eval.batch_size)
        final_report = _score(final, truth.labels, truth.num_classes, ignore)

        foreground = truth.labels != 0
        run = {
            "seed": int(seed),
            "pseudo_miou": pseudo_report.miou,
            "pseudo_accuracy": pseudo_report.pixel_accuracy,
            "final_miou": final_report.miou,
            "final_accuracy": final_report.pixel_accuracy,
            "gain": final_report.miou - pseudo_report.miou,
            "pseudo_classes": occupied_classes(pseudo, foreground),
            "final_classes": occupied_classes(final, foreground),
        }
        write_report(run_dir / "experiment.json", run)
        logger.info("Seed %d: pseudo miou=%.4f final miou=%.4f", seed, run["pseudo_miou"], run["final_miou"])
        runs.append(run)

    summary = {
        "runs": runs,
        "median_pseudo_miou": float(np.median([r["pseudo_miou"] for r in runs])),
        "median_final_miou": float(np.median([r["final_miou"] for r in runs])),
        "median_gain": float(np.median([r["gain"] for r in runs])),
    }
    return summary
