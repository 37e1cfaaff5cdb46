"""Seeded k-means with k-means++ initialisation and restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return cdist(X, C, metric="sqeuclidean")


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_dist(X, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_dist(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _repair_empty(X: np.ndarray, labels: np.ndarray, centroids: np.ndarray, sq: np.ndarray) -> None:
    """Seed each empty cluster with the worst-fitting point of the currently largest cluster."""
    k = len(centroids)
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        big = int(np.argmax(counts))
        if counts[big] < 2:
            continue
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(sq[members, big])]
        labels[far] = j
        centroids[j] = X[far]


def _lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    k = len(centroids)
    prev = np.inf
    for _ in range(max_iter):
        sq = _sq_dist(X, centroids)
        labels = np.argmin(sq, axis=1)
        _repair_empty(X, labels, centroids, sq)
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
        inertia = float(_sq_dist(X, centroids)[np.arange(len(X)), labels].sum())
        if prev < np.inf and prev - inertia <= tol * max(prev, 1e-300):
            break
        prev = inertia
    sq = _sq_dist(X, centroids)
    labels = np.argmin(sq, axis=1)
    _repair_empty(X, labels, centroids, sq)
    for j in range(k):
        members = labels == j
        if members.any():
            centroids[j] = X[members].mean(axis=0)
    inertia = float(_sq_dist(X, centroids)[np.arange(len(X)), labels].sum())
    return KMeansResult(labels, centroids, inertia)


def kmeans(X: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    X = np.asarray(X, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(X) < k:
        raise ValueError(f"cannot form {k} clusters from {len(X)} samples")
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_init):
        result = _lloyd(X, kmeans_plusplus(X, k, rng), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best
