from __future__ import annotations

import json
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from tomoseg import pseudolabel
from tomoseg.errors import ClusteringError
from tomoseg.pseudolabel import ClusterModel
from tomoseg.volume_io import Volume


def best_contiguous_partition(values: list[float], k: int) -> list[float]:
    """
    Exhaustive 1D optimum: clusters of sorted scalars are contiguous runs.
    """

    ordered = sorted(values)
    best_cost, best_means = float("inf"), []
    for cuts in combinations(range(1, len(ordered)), k - 1):
        bounds = (0, *cuts, len(ordered))
        groups = [ordered[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        means = [float(np.mean(g)) for g in groups]
        cost = sum(float(np.sum((np.asarray(g) - m) ** 2)) for g, m in zip(groups, means))
        if cost < best_cost:
            best_cost, best_means = cost, means
    return best_means


def test_kmeans_matches_exhaustive_optimum() -> None:
    values = [0.1, 0.15, 0.8, 0.85, 0.9]
    model = pseudolabel.kmeans_fit(np.asarray(values), 2, seed=0)
    np.testing.assert_allclose(model.centroids, best_contiguous_partition(values, 2), atol=1e-9)
    np.testing.assert_allclose(model.centroids, [0.125, 0.85], atol=1e-9)


def test_kmeans_exact_two_values_has_zero_objective() -> None:
    model = pseudolabel.kmeans_fit(np.array([0.0, 0.0, 1.0, 1.0]), 2, seed=0)
    np.testing.assert_allclose(model.centroids, [0.0, 1.0], atol=1e-12)
    assert model.objective == pytest.approx(0.0, abs=1e-12)


def test_kmeans_single_cluster_is_mean() -> None:
    values = np.array([0.2, 0.4, 0.9])
    model = pseudolabel.kmeans_fit(values, 1, seed=0)
    assert model.centroids[0] == pytest.approx(0.5)


def test_kmeans_centroids_ascending_and_seed_stable() -> None:
    rng = np.random.default_rng(1)
    pixels = np.concatenate([rng.normal(m, 0.03, 300) for m in (0.7, 0.1, 0.4)])
    first = pseudolabel.kmeans_fit(pixels, 3, seed=5)
    second = pseudolabel.kmeans_fit(pixels, 3, seed=5)
    assert list(first.centroids) == sorted(first.centroids)
    assert first.centroids == second.centroids


def test_kmeans_labeling_is_locally_optimal() -> None:
    rng = np.random.default_rng(2)
    pixels = np.concatenate([rng.normal(m, 0.05, 200) for m in (0.2, 0.5, 0.8)])
    model = pseudolabel.kmeans_fit(pixels, 3, seed=0)
    labels = pseudolabel.assign_labels(pixels, model)
    centroids = np.asarray(model.centroids)
    base = pseudolabel.within_cluster_ss(pixels, labels, centroids)
    for index in rng.choice(pixels.size, size=20, replace=False):
        for other in range(3):
            if other == labels[index]:
                continue
            moved = labels.copy()
            moved[index] = other
            assert pseudolabel.within_cluster_ss(pixels, moved, centroids) >= base


def test_too_few_distinct_values_reports_deficit() -> None:
    with pytest.raises(ClusteringError, match="deficit 2"):
        pseudolabel.kmeans_fit(np.array([0.1, 0.1, 0.9, 0.9]), 4)


def test_assign_matches_brute_force_nearest() -> None:
    rng = np.random.default_rng(0)
    pixels = rng.random(10_000)
    model = ClusterModel(method="kmeans", num_classes=3, seed=0, centroids=(0.1, 0.45, 0.9))
    expected = np.argmin(np.abs(pixels[:, None] - np.array([0.1, 0.45, 0.9])[None, :]), axis=1)
    np.testing.assert_array_equal(pseudolabel.assign_labels(pixels, model), expected)


def test_assign_tie_goes_to_lower_class() -> None:
    model = ClusterModel(method="kmeans", num_classes=2, seed=0, centroids=(0.0, 1.0))
    assert pseudolabel.assign_labels(np.array([0.5]), model).tolist() == [0]


def test_assign_keeps_input_shape() -> None:
    model = ClusterModel(method="multi_otsu", num_classes=3, seed=None, thresholds=(0.3, 0.6))
    labels = pseudolabel.assign_labels(np.array([[0.1, 0.5], [0.7, 0.3]]), model)
    assert labels.shape == (2, 2)
    assert labels.tolist() == [[0, 1], [2, 0]]


def test_multi_otsu_threshold_maximizes_between_class_variance() -> None:
    rng = np.random.default_rng(4)
    pixels = np.clip(np.concatenate([rng.normal(0.3, 0.08, 4000), rng.normal(0.7, 0.08, 2000)]), 0, 1)
    model = pseudolabel.multi_otsu_fit(pixels, 2, num_bins=256)

    counts, edges = np.histogram(pixels, bins=256)
    centers = (edges[:-1] + edges[1:]) / 2.0

    def variance(split: int) -> float:
        w0, w1 = counts[:split].sum(), counts[split:].sum()
        if w0 == 0 or w1 == 0:
            return 0.0
        m0 = np.sum(counts[:split] * centers[:split]) / w0
        m1 = np.sum(counts[split:] * centers[split:]) / w1
        total = counts.sum()
        return float((w0 / total) * (w1 / total) * (m0 - m1) ** 2)

    best = max(variance(split) for split in range(1, 256))
    chosen = int(np.argmin(np.abs(centers - model.thresholds[0]))) + 1
    assert variance(chosen) == pytest.approx(best, rel=1e-4)


def test_multi_otsu_degenerate_histogram_raises() -> None:
    with pytest.raises(ClusteringError, match="bins occupied"):
        pseudolabel.multi_otsu_fit(np.array([0.0, 0.0, 1.0, 1.0]), 3)


def test_multi_otsu_agrees_with_kmeans_on_separated_levels() -> None:
    pixels = np.repeat([0.0, 0.5, 1.0], 100)
    otsu = pseudolabel.multi_otsu_fit(pixels, 3)
    km = pseudolabel.kmeans_fit(pixels, 3)
    np.testing.assert_array_equal(
        pseudolabel.assign_labels(pixels, otsu), pseudolabel.assign_labels(pixels, km)
    )


def test_gmm_recovers_well_separated_means() -> None:
    rng = np.random.default_rng(0)
    pixels = np.concatenate([rng.normal(0.2, 0.01, 100), rng.normal(0.8, 0.01, 100)])
    model = pseudolabel.gmm_fit(pixels, 2, seed=0)
    means = [component[1] for component in model.components]
    assert means[0] == pytest.approx(0.2, abs=0.02)
    assert means[1] == pytest.approx(0.8, abs=0.02)
    weights = [component[0] for component in model.components]
    assert sum(weights) == pytest.approx(1.0)


def test_gmm_point_masses_get_hard_responsibilities() -> None:
    pixels = np.repeat([0.25, 0.75], 50)
    model = pseudolabel.gmm_fit(pixels, 2, seed=0)
    labels = pseudolabel.assign_labels(pixels, model)
    np.testing.assert_array_equal(labels, np.repeat([0, 1], 50))


def test_gmm_single_component_is_sample_moments() -> None:
    rng = np.random.default_rng(3)
    pixels = rng.normal(0.5, 0.1, 500)
    model = pseudolabel.gmm_fit(pixels, 1, seed=0)
    weight, mean, variance = model.components[0]
    assert weight == pytest.approx(1.0)
    assert mean == pytest.approx(float(pixels.mean()), abs=1e-6)
    assert variance == pytest.approx(float(pixels.var()), rel=1e-3)


def test_generate_pseudolabels_is_seeded_and_ordered() -> None:
    rng = np.random.default_rng(7)
    data = rng.choice([0.1, 0.5, 0.9], size=(3, 16, 16)).astype(np.float32)
    volume = Volume(data=data)
    first, model = pseudolabel.generate_pseudolabels(volume, "kmeans", 3, seed=11, sample_size=200)
    second, _ = pseudolabel.generate_pseudolabels(volume, "kmeans", 3, seed=11, sample_size=200)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert first.provenance == "pseudo"
    assert first.shape == volume.shape
    # Lowest intensity is class 0.
    assert set(first.labels[data == 0.1].tolist()) == {0}
    assert set(first.labels[data == 0.9].tolist()) == {2}
    assert model.sample_size == 200


def test_unknown_method_raises() -> None:
    volume = Volume(data=np.linspace(0, 1, 8, dtype=np.float32).reshape(2, 2, 2))
    with pytest.raises(ClusteringError, match="Unknown"):
        pseudolabel.generate_pseudolabels(volume, "watershed", 2)


def test_cluster_report_is_json(tmp_path: Path) -> None:
    model = pseudolabel.kmeans_fit(np.array([0.0, 0.1, 0.9, 1.0]), 2)
    path = pseudolabel.write_cluster_report(tmp_path / "report.json", model)
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload["method"] == "kmeans"
    assert payload["num_classes"] == 2
    assert len(payload["centroids"]) == 2
