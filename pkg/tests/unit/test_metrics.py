"""
Unit tests for evaluation metrics.

Each metric is compared with a direct re-implementation of its definition
(confusion-matrix F1, Davies-Bouldin formula, sorted-sample 1-D Wasserstein).
"""

import itertools

import numpy as np
import pytest

from mfa_replay.errors import ValidationError
from mfa_replay.evaluation.metrics import (
    INVERSE_EPS,
    davies_bouldin,
    per_class_f1,
    sliced_wasserstein,
    wasserstein_alignment,
    weighted_f1,
)


def f1_oracle(pred, true, num_classes):
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(pred, true):
        confusion[t, p] += 1
    total = confusion.sum()
    score = 0.0
    for c in range(num_classes):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        support = confusion[c, :].sum()
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        score += f1 * support / total
    return score


def davies_bouldin_oracle(x, y):
    classes = sorted(set(y.tolist()))
    centroids = {c: x[y == c].mean(axis=0) for c in classes}
    spread = {c: np.mean(np.linalg.norm(x[y == c] - centroids[c], axis=1)) for c in classes}
    worst = []
    for i in classes:
        ratios = [
            (spread[i] + spread[j]) / np.linalg.norm(centroids[i] - centroids[j]) for j in classes if j != i
        ]
        worst.append(max(ratios))
    return float(np.mean(worst))


def wasserstein_1d_oracle(u, v):
    return float(np.mean(np.abs(np.sort(u) - np.sort(v))))


@pytest.mark.unit
class TestWeightedF1:
    """Support-weighted F1."""

    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 2, 1])
        assert weighted_f1(labels, labels, 3) == 1.0

    def test_hand_computed_example(self):
        value = weighted_f1([0, 1, 1, 1], [0, 0, 1, 1], 2)
        assert value == pytest.approx(0.5 * (2 / 3) + 0.5 * (4 / 5), abs=1e-12)
        assert value == pytest.approx(0.7333, abs=1e-4)

    def test_predictions_of_absent_class_score_zero(self):
        assert weighted_f1([2, 2, 2, 2], [0, 0, 1, 1], 3) == 0.0

    def test_matches_confusion_matrix_oracle(self, rng):
        for _ in range(1000):
            num_classes = int(rng.integers(2, 6))
            n = int(rng.integers(1, 40))
            true = rng.integers(0, num_classes, size=n)
            pred = np.where(rng.random(n) < 0.6, true, rng.integers(0, num_classes, size=n))
            assert weighted_f1(pred, true, num_classes) == pytest.approx(
                f1_oracle(pred, true, num_classes), abs=1e-12
            )

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            weighted_f1([], [], 3)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValidationError):
            weighted_f1([0, 1], [0, 3], 3)

    def test_per_class_f1_has_one_entry_per_class(self):
        scores = per_class_f1([0, 1, 1, 1], [0, 0, 1, 1], 3)
        assert scores.tolist() == pytest.approx([2 / 3, 4 / 5, 0.0], abs=1e-12)


@pytest.mark.unit
class TestWassersteinAlignment:
    """Sliced Wasserstein-1 distance between domains."""

    def test_identical_domains(self, rng):
        features = rng.normal(size=(50, 4))
        distance, inverse = wasserstein_alignment({0: features, 1: features.copy()})
        assert distance == pytest.approx(0.0, abs=1e-12)
        assert inverse == pytest.approx(1.0 / INVERSE_EPS)

    def test_one_dimensional_offset(self, rng):
        u = rng.normal(size=200)
        distance, _ = wasserstein_alignment({0: u, 1: u + 0.75})
        assert distance == pytest.approx(0.75, abs=1e-9)

    def test_one_dimensional_matches_sorted_sample_oracle(self, rng):
        for _ in range(20):
            u = rng.normal(size=30)
            v = rng.standard_t(3, size=30) + rng.normal()
            distance, _ = wasserstein_alignment({0: u, 1: v})
            assert distance == pytest.approx(wasserstein_1d_oracle(u, v), abs=1e-9)

    def test_distance_grows_with_translation(self, rng):
        features = rng.normal(size=(100, 3))
        unit = np.ones(3) / np.sqrt(3)
        distances = [wasserstein_alignment({0: features, 1: features + s * unit})[0] for s in (0.1, 1.0, 10.0)]
        assert distances[0] < distances[1] < distances[2]

    def test_averages_over_domain_pairs(self, rng):
        domains = {d: rng.normal(size=(40, 2)) + d for d in range(3)}
        pairs = [sliced_wasserstein(domains[a], domains[b]) for a, b in itertools.combinations(range(3), 2)]
        assert wasserstein_alignment(domains)[0] == pytest.approx(np.mean(pairs), abs=1e-12)

    def test_dimension_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            wasserstein_alignment({0: rng.normal(size=(10, 3)), 1: rng.normal(size=(10, 4))})

    def test_single_domain_rejected(self, rng):
        with pytest.raises(ValidationError):
            wasserstein_alignment({0: rng.normal(size=(10, 3))})


@pytest.mark.unit
class TestDaviesBouldin:
    """Cluster quality of class clusters."""

    def test_hand_computed_example(self):
        x = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]])
        y = np.array([0, 0, 1, 1])
        index, inverse = davies_bouldin(x, y)
        assert index == pytest.approx(0.2, abs=1e-9)
        assert inverse == pytest.approx(1.0 / (0.2 + INVERSE_EPS), rel=1e-9)

    def test_matches_direct_formula(self, rng):
        for _ in range(50):
            num_classes = int(rng.integers(2, 5))
            y = np.repeat(np.arange(num_classes), int(rng.integers(2, 8)))
            x = rng.normal(size=(len(y), 3)) + 3.0 * y[:, None]
            assert davies_bouldin(x, y)[0] == pytest.approx(davies_bouldin_oracle(x, y), abs=1e-9)

    def test_scale_invariance(self, rng):
        y = np.repeat(np.arange(3), 6)
        x = rng.normal(size=(18, 4)) + y[:, None]
        assert davies_bouldin(7.5 * x, y)[0] == pytest.approx(davies_bouldin(x, y)[0], rel=1e-9)

    def test_tight_clusters_score_near_zero(self):
        x = np.array([[0.0, 0.0], [0.0, 1e-9], [100.0, 0.0], [100.0, 1e-9]])
        index, inverse = davies_bouldin(x, np.array([0, 0, 1, 1]))
        assert index < 1e-9
        assert inverse > 1e6

    def test_single_class_rejected(self, rng):
        with pytest.raises(ValidationError):
            davies_bouldin(rng.normal(size=(5, 2)), np.zeros(5, dtype=int))

    def test_one_sample_per_class(self):
        index, inverse = davies_bouldin(np.array([[0.0, 0.0], [10.0, 0.0]]), np.array([0, 1]))
        assert index == 0.0
        assert inverse == pytest.approx(1.0 / INVERSE_EPS)

    def test_singleton_next_to_a_larger_cluster(self):
        x = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 1.0]])
        y = np.array([0, 0, 1])
        assert davies_bouldin(x, y)[0] == pytest.approx(davies_bouldin_oracle(x, y), abs=1e-9)
