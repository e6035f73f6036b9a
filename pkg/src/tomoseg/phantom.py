"""
Synthetic tomography-like volumes with exact ground truth.

Purpose:
- Stand in for real scans in tests and experiments: every voxel's class is
  known, and intensity corruptions can be dialed in one at a time.

Geometry:
- Class 0 is the background outside a cylindrical sample whose radius is
  set by the background fraction.
- "shell" classes take the outermost sample voxels (an annulus).
- "inclusions" classes are a thin band around an iso-surface of a smooth
  random field that is stretched along z, so they persist across adjacent
  slices.
- "blobs" classes split the remaining sample voxels by quantiles of another
  smooth random field.

Corruptions (intensity only, labels never change):
- drift: multiplicative (1 + amplitude * g), g in [-1, 1], linear along x
  or radial.
- streaks: straight bright/dark lines, identical in every slice.
- fringe: bright band just outside and dark band just inside the sample
  boundary.
- noise: additive gaussian.

Structures and corruptions draw from separate seeded generators, so the
same seed gives identical labels whatever the corruption settings.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable
import logging

import numpy as np
from scipy import ndimage

from .config import PhantomSpec
from .errors import ConfigError
from .metrics import MetricReport, matched_miou, miou
from .volume_io import LABEL_DTYPE, LabelVolume, Volume, save_labels, save_volume

logger = logging.getLogger(__name__)

STRUCTURES = ("blobs", "inclusions", "shell")
DRIFT_KINDS = ("linear", "radial")
# Inclusion fields are smoothed this many times more along z than in-plane.
INCLUSION_Z_STRETCH = 3.0


def validate_phantom_spec(spec: PhantomSpec) -> None:
    k = len(spec.class_means)
    if k < 2:
        raise ConfigError("phantom.class_means needs at least 2 classes.")
    if len(spec.fractions) != k or len(spec.structures) != k:
        raise ConfigError(
            f"phantom.class_means ({k}), fractions ({len(spec.fractions)}) and "
            f"structures ({len(spec.structures)}) must have the same length."
        )
    if any(b <= a for a, b in zip(spec.class_means, spec.class_means[1:])):
        # Clusters are numbered by ascending intensity; class ids must follow the same order.
        raise ConfigError(f"phantom.class_means must be strictly increasing, got {spec.class_means}.")
    if any(f <= 0 for f in spec.fractions):
        raise ConfigError(f"phantom.fractions must be positive, got {spec.fractions}.")
    if abs(sum(spec.fractions) - 1.0) > 1e-6:
        raise ConfigError(f"phantom.fractions must sum to 1, got {sum(spec.fractions):.6f}.")
    if spec.structures[0] != "background":
        raise ConfigError("phantom.structures[0] must be 'background'.")
    for k_idx, kind in enumerate(spec.structures[1:], start=1):
        if kind not in STRUCTURES:
            raise ConfigError(f"phantom.structures[{k_idx}] must be one of {STRUCTURES}, got '{kind}'.")
        if kind == "inclusions" and spec.fractions[k_idx] > spec.max_inclusion_fraction:
            raise ConfigError(
                f"Inclusion class {k_idx} fraction {spec.fractions[k_idx]} is too large for thin "
                f"structures (max {spec.max_inclusion_fraction})."
            )
    if spec.drift_kind not in DRIFT_KINDS:
        raise ConfigError(f"phantom.drift_kind must be one of {DRIFT_KINDS}.")
    if len(spec.shape) != 3 or min(spec.shape) < 1:
        raise ConfigError(f"phantom.shape must be three positive dims, got {spec.shape}.")
    if spec.noise_sigma < 0 or spec.drift_amplitude < 0:
        raise ConfigError("phantom.noise_sigma and drift_amplitude must be >= 0.")

    _, h, w = spec.shape
    radius = sample_radius(spec)
    if 2.0 * radius > min(h, w):
        raise ConfigError(
            f"Background fraction {spec.fractions[0]} leaves a sample of radius {radius:.1f} px, "
            f"which does not fit a {h}x{w} slice."
        )


def sample_radius(spec: PhantomSpec) -> float:
    _, h, w = spec.shape
    return float(np.sqrt((1.0 - spec.fractions[0]) * h * w / np.pi))


def _radial_distance(h: int, w: int) -> np.ndarray:
    rows, cols = np.ogrid[:h, :w]
    return np.sqrt((rows - (h - 1) / 2.0) ** 2 + (cols - (w - 1) / 2.0) ** 2)


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int, int], sigma: tuple[float, float, float]) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return field / (field.std() or 1.0)


def _take(labels: np.ndarray, free: np.ndarray, order_key: np.ndarray, count: int, cls: int) -> None:
    """
    Give `count` free voxels with the smallest order_key to class `cls`.
    """

    candidates = np.flatnonzero(free)
    chosen = candidates[np.argsort(order_key.reshape(-1)[candidates], kind="stable")[:count]]
    labels.reshape(-1)[chosen] = cls
    free.reshape(-1)[chosen] = False


def generate_labels(spec: PhantomSpec) -> LabelVolume:
    """
    Ground-truth geometry only (no intensities).
    """

    validate_phantom_spec(spec)
    d, h, w = spec.shape
    rng = np.random.default_rng([spec.seed, 0])
    dist2d = _radial_distance(h, w)
    inside2d = dist2d < sample_radius(spec)
    free = np.broadcast_to(inside2d, (d, h, w)).copy()
    dist = np.broadcast_to(dist2d, (d, h, w))

    inclusion_field = _smooth_field(
        rng, (d, h, w), (spec.inclusion_sigma * INCLUSION_Z_STRETCH, spec.inclusion_sigma, spec.inclusion_sigma)
    )
    blob_field = _smooth_field(rng, (d, h, w), (spec.blob_sigma,) * 3)

    labels = np.zeros((d, h, w), dtype=LABEL_DTYPE)
    sample_total = int(free.sum())
    weights = np.asarray(spec.fractions[1:]) / (1.0 - spec.fractions[0])
    counts = np.floor(weights * sample_total).astype(int)
    classes = list(range(1, len(spec.fractions)))
    order = (
        [k for k in classes if spec.structures[k] == "shell"]
        + [k for k in classes if spec.structures[k] == "inclusions"]
        + [k for k in classes if spec.structures[k] == "blobs"]
    )
    # Rounding leftovers go to the last class placed.
    counts[order[-1] - 1] += sample_total - int(counts.sum())

    inclusion_level = None
    for k in order:
        n = int(counts[k - 1])
        kind = spec.structures[k]
        if kind == "shell":
            _take(labels, free, -dist, n, k)
        elif kind == "inclusions":
            if inclusion_level is None:
                inclusion_level = float(np.median(inclusion_field[free]))
            _take(labels, free, np.abs(inclusion_field - inclusion_level), n, k)
        else:
            _take(labels, free, blob_field, n, k)
    return LabelVolume(labels=labels, num_classes=len(spec.fractions), provenance="ground_truth")


def drift_field(spec: PhantomSpec) -> np.ndarray:
    """
    (H, W) field g in [-1, 1] for the contrast drift.
    """

    _, h, w = spec.shape
    if spec.drift_kind == "linear":
        ramp = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
        return np.broadcast_to(ramp, (h, w)).copy()
    dist = _radial_distance(h, w)
    peak = dist.max() or 1.0
    return 2.0 * dist / peak - 1.0


def streak_mask(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """
    (H, W) membership mask and signed contrast map of the straight streaks.
    """

    _, h, w = spec.shape
    rows, cols = np.mgrid[:h, :w].astype(np.float64)
    rows -= (h - 1) / 2.0
    cols -= (w - 1) / 2.0
    mask = np.zeros((h, w), dtype=bool)
    contrast = np.zeros((h, w), dtype=np.float64)
    radius = sample_radius(spec)
    for _ in range(spec.streak_count):
        angle = rng.uniform(0.0, np.pi)
        offset = rng.uniform(-radius, radius)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        distance = np.abs(rows * np.cos(angle) + cols * np.sin(angle) - offset)
        line = distance <= spec.streak_width / 2.0
        mask |= line
        contrast[line] = sign * spec.streak_contrast
    return mask, contrast


def fringe_masks(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """
    (outside band, inside band) around the sample boundary.
    """

    _, h, w = spec.shape
    dist = _radial_distance(h, w)
    radius = sample_radius(spec)
    outside = (dist >= radius) & (dist < radius + spec.fringe_width)
    inside = (dist < radius) & (dist >= radius - spec.fringe_width)
    return outside, inside


def generate_phantom_regions(spec: PhantomSpec) -> dict[str, np.ndarray]:
    """
    Per-corruption (D, H, W) masks for corruption_report breakdowns.
    """

    d = spec.shape[0]
    rng = np.random.default_rng([spec.seed, 1])
    streaks, _ = streak_mask(spec, rng)
    outside, inside = fringe_masks(spec)
    fringe = outside | inside if spec.fringe_width > 0 else np.zeros_like(outside)
    regions = {
        "streaks": streaks,
        "fringe": fringe,
        "unaffected": ~(streaks | fringe),
    }
    return {name: np.broadcast_to(mask, (d, *mask.shape)).copy() for name, mask in regions.items()}


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """
    Build (volume, ground truth) for a phantom recipe.
    """

    truth = generate_labels(spec)
    means = np.asarray(spec.class_means, dtype=np.float64)
    data = means[truth.labels]

    rng = np.random.default_rng([spec.seed, 1])
    streaks, streak_contrast = streak_mask(spec, rng)
    if spec.drift_amplitude > 0:
        data = data * (1.0 + spec.drift_amplitude * drift_field(spec))
    if spec.streak_count > 0:
        data = data + streak_contrast
    if spec.fringe_width > 0:
        outside, inside = fringe_masks(spec)
        data = data + spec.fringe_contrast * outside - spec.fringe_contrast * inside
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)

    logger.info(
        "Phantom shape=%s K=%d drift=%.3f noise=%.3f streaks=%d fringe=%d",
        spec.shape,
        truth.num_classes,
        spec.drift_amplitude,
        spec.noise_sigma,
        spec.streak_count,
        spec.fringe_width,
    )
    return Volume(data=data.astype(np.float32)), truth


def corruption_report(
    v: Volume,
    gt: LabelVolume,
    pseudo: LabelVolume,
    regions: dict[str, np.ndarray] | None = None,
    ignore: Iterable[int] = (0,),
) -> MetricReport:
    """
    Pseudo-label quality against ground truth, optionally broken down per
    corruption region. Class sets of different sizes are matched first.
    """

    if not (v.shape == gt.shape == pseudo.shape):
        raise ValueError(f"Shape mismatch: volume {v.shape}, gt {gt.shape}, pseudo {pseudo.shape}.")
    ignore = tuple(ignore)

    def score(pred: np.ndarray, truth: np.ndarray) -> MetricReport:
        if pseudo.num_classes != gt.num_classes:
            return matched_miou(pred, truth, pseudo.num_classes, gt.num_classes, ignore)
        return miou(pred, truth, ignore, num_classes=gt.num_classes)

    overall = score(pseudo.labels, gt.labels)
    breakdown: dict[str, MetricReport] = {}
    for name, mask in (regions or {}).items():
        if mask.shape != gt.shape:
            raise ValueError(f"Region '{name}' mask {mask.shape} does not match {gt.shape}.")
        truth = gt.labels[mask]
        if not np.any(~np.isin(truth, ignore)):
            continue
        breakdown[name] = score(pseudo.labels[mask], truth)
    if not breakdown:
        return overall
    return MetricReport(
        pixel_accuracy=overall.pixel_accuracy,
        per_class_iou=overall.per_class_iou,
        miou=overall.miou,
        ignored_classes=overall.ignored_classes,
        pixel_counts=overall.pixel_counts,
        absent_classes=overall.absent_classes,
        breakdown=breakdown,
    )


def save_phantom(directory: str | Path, volume: Volume, truth: LabelVolume) -> tuple[Path, Path]:
    directory = Path(directory)
    return save_volume(directory / "volume.raw", volume), save_labels(directory / "ground_truth.raw", truth)
