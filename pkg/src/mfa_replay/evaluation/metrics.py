"""
Scalar metrics: weighted F1, sliced Wasserstein alignment, Davies-Bouldin.

All functions take plain arrays (numpy or torch) and return Python floats.
"""

import itertools
from typing import Mapping, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.stats import wasserstein_distance
from sklearn.metrics import davies_bouldin_score, f1_score

from mfa_replay.errors import ValidationError

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence]

INVERSE_EPS = 1e-8
DEFAULT_PROJECTIONS = 128


def _as_numpy(values: ArrayLike) -> np.ndarray:
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy()
    return np.asarray(values)


def _check_labels(predictions: ArrayLike, labels: ArrayLike, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    pred = _as_numpy(predictions).astype(np.int64).ravel()
    true = _as_numpy(labels).astype(np.int64).ravel()
    if true.size == 0:
        raise ValidationError("F1 of an empty set is undefined")
    if pred.shape != true.shape:
        raise ValidationError(f"{pred.size} predictions for {true.size} labels")
    for name, values in (("labels", true), ("predictions", pred)):
        if values.min() < 0 or values.max() >= num_classes:
            raise ValidationError(f"{name} must lie in [0, {num_classes})")
    return pred, true


def weighted_f1(predictions: ArrayLike, labels: ArrayLike, num_classes: int) -> float:
    """
    Per-class F1 averaged with weights proportional to class support.

    Classes with no predictions score F1 = 0; classes absent from the labels
    carry zero weight.
    """
    pred, true = _check_labels(predictions, labels, num_classes)
    return float(
        f1_score(true, pred, labels=list(range(num_classes)), average="weighted", zero_division=0)
    )


def per_class_f1(predictions: ArrayLike, labels: ArrayLike, num_classes: int) -> np.ndarray:
    """F1 of every class, length num_classes (0 for classes without support or predictions)."""
    pred, true = _check_labels(predictions, labels, num_classes)
    return np.asarray(
        f1_score(true, pred, labels=list(range(num_classes)), average=None, zero_division=0),
        dtype=np.float64,
    )


def random_directions(dim: int, count: int, seed: int) -> np.ndarray:
    """`count` unit vectors in R^dim from a fixed seed, shape count x dim."""
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(count, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def sliced_wasserstein(
    u: np.ndarray, v: np.ndarray, num_projections: int = DEFAULT_PROJECTIONS, seed: int = 0
) -> float:
    """Mean over random unit projections of the 1-D Wasserstein-1 distance."""
    directions = random_directions(u.shape[1], num_projections, seed)
    pu, pv = u @ directions.T, v @ directions.T
    return float(
        np.mean([wasserstein_distance(pu[:, k], pv[:, k]) for k in range(num_projections)])
    )


def wasserstein_alignment(
    features_by_domain: Mapping[int, ArrayLike],
    num_projections: int = DEFAULT_PROJECTIONS,
    seed: int = 0,
    eps: float = INVERSE_EPS,
) -> Tuple[float, float]:
    """
    Sliced Wasserstein-1 distance averaged over all domain pairs.

    Returns:
        (d_W, 1 / (d_W + eps))

    Raises:
        ValidationError: Fewer than 2 domains, fewer than 2 samples in a
            domain, or differing feature dimensions
    """
    if len(features_by_domain) < 2:
        raise ValidationError("alignment needs at least 2 domains")
    feats = {}
    for domain, values in features_by_domain.items():
        array = _as_numpy(values).astype(np.float64)
        if array.ndim == 1:
            array = array[:, None]
        if array.ndim != 2 or array.shape[0] < 2:
            raise ValidationError(f"domain {domain} needs at least 2 feature vectors")
        feats[domain] = array
    dims = {a.shape[1] for a in feats.values()}
    if len(dims) != 1:
        raise ValidationError(f"feature dimensions differ across domains: {sorted(dims)}")
    distances = [
        sliced_wasserstein(feats[a], feats[b], num_projections, seed)
        for a, b in itertools.combinations(sorted(feats), 2)
    ]
    d_w = float(np.mean(distances))
    return d_w, 1.0 / (d_w + eps)


def davies_bouldin(features: ArrayLike, labels: ArrayLike, eps: float = INVERSE_EPS) -> Tuple[float, float]:
    """
    Davies-Bouldin index of class clusters in feature space.

    Returns:
        (I_DB, 1 / (I_DB + eps))

    Raises:
        ValidationError: Fewer than 2 classes present
    """
    x = _as_numpy(features).astype(np.float64)
    y = _as_numpy(labels).astype(np.int64).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValidationError("davies_bouldin expects N x d features and N labels")
    present = np.unique(y)
    if present.size < 2:
        raise ValidationError("davies_bouldin needs at least 2 classes")
    if present.size == y.size:
        # one sample per cluster: every scatter is 0
        index = 0.0
    else:
        index = float(davies_bouldin_score(x, y))
    return index, 1.0 / (index + eps)
