"""
Stage-1 pseudo labels from voxel-intensity clustering.

Purpose:
- Fit KMeans, Multi-Otsu or a 1D Gaussian mixture on a voxel subsample.
- Assign every voxel, with class index increasing with intensity.
- Record the fit wall time for the clustering report.

Logic flow:
1) generate_pseudolabels() draws a seeded uniform subsample of voxels.
2) <method>_fit() returns a ClusterModel in canonical (ascending) order.
3) assign_labels() labels the whole volume slab by slab.
4) write_cluster_report() stores method/K/seed/parameters/objective/time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
import json
import logging
import time
import warnings

import numpy as np
from skimage.filters import threshold_multiotsu
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from .errors import ClusteringError
from .volume_io import LABEL_DTYPE, LabelVolume, Volume

logger = logging.getLogger(__name__)

GMM_VARIANCE_FLOOR = 1e-8
ASSIGN_CHUNK = 1 << 20


@dataclass(frozen=True)
class ClusterModel:
    """
    Fitted 1D clustering model.

    objective is method specific:
    - kmeans: within-cluster sum of squares J on the fit sample.
    - multi_otsu: between-class variance of the fit sample.
    - gmm: mean per-voxel log-likelihood of the fit sample.
    """

    method: str
    num_classes: int
    seed: int | None
    centroids: tuple[float, ...] | None = None
    thresholds: tuple[float, ...] | None = None
    components: tuple[tuple[float, float, float], ...] | None = None
    objective: float = 0.0
    fit_seconds: float = 0.0
    sample_size: int = 0


def _as_pixels(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64).reshape(-1)


def _check_distinct(pixels: np.ndarray, k: int) -> None:
    if k < 1:
        raise ClusteringError(f"K must be >= 1, got {k}.")
    if pixels.size < k:
        raise ClusteringError(f"Need at least K={k} pixels, got {pixels.size}.")
    distinct = np.unique(pixels).size
    if distinct < k:
        raise ClusteringError(
            f"Need at least K={k} distinct values, got {distinct} (deficit {k - distinct})."
        )


def within_cluster_ss(pixels: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    """
    Total within-cluster sum of squares J for a labeling.
    """

    pixels = _as_pixels(pixels)
    return float(np.sum((pixels - np.asarray(centroids, dtype=np.float64)[labels]) ** 2))


def kmeans_fit(
    pixels: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-4,
    *,
    n_init: int = 4,
) -> ClusterModel:
    """
    Lloyd's KMeans on scalar data, k-means++ seeding, centroids ascending.
    """

    pixels = _as_pixels(pixels)
    _check_distinct(pixels, k)

    start = time.perf_counter()
    estimator = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=n_init,
        max_iter=max_iter,
        tol=tol,
        random_state=seed,
    )
    estimator.fit(pixels.reshape(-1, 1))
    centroids = np.sort(estimator.cluster_centers_.reshape(-1))
    elapsed = time.perf_counter() - start

    model = ClusterModel(
        method="kmeans",
        num_classes=k,
        seed=seed,
        centroids=tuple(float(c) for c in centroids),
        fit_seconds=elapsed,
        sample_size=int(pixels.size),
    )
    labels = assign_labels(pixels, model)
    objective = within_cluster_ss(pixels, labels, centroids)
    logger.debug("kmeans K=%d iterations=%d J=%.6g", k, estimator.n_iter_, objective)
    return replace(model, objective=objective)


def multi_otsu_fit(pixels: np.ndarray, k: int, num_bins: int = 256) -> ClusterModel:
    """
    K-1 thresholds maximizing between-class variance on a num_bins histogram.
    """

    pixels = _as_pixels(pixels)
    if k < 2:
        raise ClusteringError(f"Multi-Otsu needs K >= 2, got {k}.")
    counts, _ = np.histogram(pixels, bins=num_bins)
    occupied = int(np.count_nonzero(counts))
    if occupied < k:
        raise ClusteringError(
            f"Degenerate histogram: only {occupied} of {num_bins} bins occupied, cannot split into K={k}."
        )

    start = time.perf_counter()
    try:
        thresholds = threshold_multiotsu(pixels, classes=k, nbins=num_bins)
    except ValueError as exc:
        raise ClusteringError(f"Multi-Otsu failed for K={k}: {exc}") from exc
    elapsed = time.perf_counter() - start

    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) <= 0):
        raise ClusteringError(f"Multi-Otsu thresholds not strictly ascending: {thresholds.tolist()}.")

    model = ClusterModel(
        method="multi_otsu",
        num_classes=k,
        seed=None,
        thresholds=tuple(float(t) for t in thresholds),
        fit_seconds=elapsed,
        sample_size=int(pixels.size),
    )
    labels = assign_labels(pixels, model)
    return replace(model, objective=between_class_variance(pixels, labels, k))


def between_class_variance(pixels: np.ndarray, labels: np.ndarray, k: int) -> float:
    pixels = _as_pixels(pixels)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.bincount(labels, weights=pixels, minlength=k)
    weights = counts / pixels.size
    present = counts > 0
    means = np.zeros(k)
    means[present] = sums[present] / counts[present]
    total_mean = pixels.mean()
    return float(np.sum(weights * (means - total_mean) ** 2))


def gmm_fit(
    pixels: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-3,
    *,
    variance_floor: float = GMM_VARIANCE_FLOOR,
) -> ClusterModel:
    """
    EM for a 1D Gaussian mixture, initialized from kmeans_fit with the same seed.
    """

    pixels = _as_pixels(pixels)
    _check_distinct(pixels, k)
    init = kmeans_fit(pixels, k, seed=seed)

    start = time.perf_counter()
    estimator = GaussianMixture(
        n_components=k,
        covariance_type="full",
        reg_covar=variance_floor,
        max_iter=max_iter,
        tol=tol,
        means_init=np.asarray(init.centroids).reshape(-1, 1),
        random_state=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            estimator.fit(pixels.reshape(-1, 1))
        except ValueError as exc:
            raise ClusteringError(
                f"GMM components collapsed for K={k}; try a smaller K. ({exc})"
            ) from exc
    elapsed = time.perf_counter() - start

    means = estimator.means_.reshape(-1)
    variances = estimator.covariances_.reshape(-1)
    weights = estimator.weights_.reshape(-1)
    if np.any(weights * pixels.size < 1.0):
        raise ClusteringError(
            f"GMM component collapse: a component holds less than one pixel for K={k}; try a smaller K."
        )
    order = np.argsort(means, kind="stable")
    weights = weights[order] / weights[order].sum()
    components = tuple(
        (float(w), float(m), float(max(v, variance_floor)))
        for w, m, v in zip(weights, means[order], variances[order])
    )
    return ClusterModel(
        method="gmm",
        num_classes=k,
        seed=seed,
        components=components,
        objective=float(estimator.score(pixels.reshape(-1, 1))),
        fit_seconds=elapsed + init.fit_seconds,
        sample_size=int(pixels.size),
    )


def gmm_log_responsibilities(pixels: np.ndarray, model: ClusterModel) -> np.ndarray:
    """
    Unnormalized log posterior per component, shape (n, K).
    """

    if model.components is None:
        raise ClusteringError("Model has no GMM components.")
    comps = np.asarray(model.components, dtype=np.float64)
    weights, means, variances = comps[:, 0], comps[:, 1], comps[:, 2]
    pixels = _as_pixels(pixels)[:, None]
    return (
        np.log(weights)
        - 0.5 * np.log(2.0 * np.pi * variances)
        - (pixels - means) ** 2 / (2.0 * variances)
    )


def _assign_chunk(chunk: np.ndarray, model: ClusterModel) -> np.ndarray:
    if model.method == "kmeans":
        centroids = np.asarray(model.centroids, dtype=np.float64)
        distances = (chunk[:, None] - centroids[None, :]) ** 2
        return np.argmin(distances, axis=1)
    if model.method == "multi_otsu":
        return np.digitize(chunk, np.asarray(model.thresholds, dtype=np.float64))
    if model.method == "gmm":
        return np.argmax(gmm_log_responsibilities(chunk, model), axis=1)
    raise ClusteringError(f"Unknown clustering method '{model.method}'.")


def assign_labels(pixels: np.ndarray, model: ClusterModel) -> np.ndarray:
    """
    Label pixels with a fitted model; ties go to the lowest class index.

    Output has the input's shape.
    """

    array = np.asarray(pixels, dtype=np.float64)
    flat = array.reshape(-1)
    out = np.empty(flat.size, dtype=np.int64)
    for start in range(0, flat.size, ASSIGN_CHUNK):
        stop = start + ASSIGN_CHUNK
        out[start:stop] = _assign_chunk(flat[start:stop], model)
    return out.reshape(array.shape)


def fit_cluster_model(
    pixels: np.ndarray,
    method: str,
    k: int,
    seed: int = 0,
    *,
    max_iter: int = 300,
    tol: float = 1e-4,
    n_init: int = 4,
    num_bins: int = 256,
) -> ClusterModel:
    if method == "kmeans":
        return kmeans_fit(pixels, k, seed, max_iter, tol, n_init=n_init)
    if method == "multi_otsu":
        return multi_otsu_fit(pixels, k, num_bins)
    if method == "gmm":
        return gmm_fit(pixels, k, seed, max_iter, tol)
    raise ClusteringError(f"Unknown clustering method '{method}'. Use kmeans, multi_otsu or gmm.")


def generate_pseudolabels(
    v: Volume,
    method: str,
    k: int,
    seed: int = 0,
    *,
    sample_size: int = 1_000_000,
    max_iter: int = 300,
    tol: float = 1e-4,
    n_init: int = 4,
    num_bins: int = 256,
) -> tuple[LabelVolume, ClusterModel]:
    """
    Fit on a seeded voxel subsample, then assign every voxel.

    Class 0 is the lowest-intensity cluster (background by convention).
    """

    flat = v.data.reshape(-1)
    rng = np.random.default_rng(seed)
    if flat.size > sample_size:
        idx = rng.choice(flat.size, size=sample_size, replace=False)
        sample = flat[idx]
    else:
        sample = flat

    model = fit_cluster_model(
        sample,
        method,
        k,
        seed,
        max_iter=max_iter,
        tol=tol,
        n_init=n_init,
        num_bins=num_bins,
    )
    labels = np.empty(v.shape, dtype=LABEL_DTYPE)
    for z in range(v.shape[0]):
        labels[z] = assign_labels(v.data[z], model).astype(LABEL_DTYPE)

    logger.info(
        "Pseudo labels method=%s K=%d fit_seconds=%.3f objective=%.6g",
        method,
        k,
        model.fit_seconds,
        model.objective,
    )
    return LabelVolume(labels=labels, num_classes=k, provenance="pseudo"), model


def cluster_report(model: ClusterModel) -> dict:
    payload = asdict(model)
    for key in ("centroids", "thresholds", "components"):
        if payload[key] is not None:
            payload[key] = [list(item) if isinstance(item, tuple) else item for item in payload[key]]
    return payload


def write_cluster_report(path: str | Path, model: ClusterModel) -> Path:
    """
    Write the clustering report (JSON) next to the label volume.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(cluster_report(model), handle, indent=2)
    return path
