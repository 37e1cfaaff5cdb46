"""Novelty-mode Local Outlier Factor on latent vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

DISTANCE_FLOOR = 1e-12


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cdist(a, b, metric="euclidean")


def _knn(dist: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest columns per row; ties resolved by ascending column index."""
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)


@dataclass(frozen=True)
class LofModel:
    reference: np.ndarray
    n_neighbors: int
    threshold: float
    k_distance: np.ndarray
    lrd: np.ndarray

    def _query_chunks(self, x: np.ndarray, chunk: int = 512):
        for start in range(0, len(x), chunk):
            yield x[start:start + chunk]

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.reference.shape[1]:
            raise ValueError(f"expected {self.reference.shape[1]}-dimensional latents, got {x.shape[1]}")
        out = []
        for part in self._query_chunks(x):
            dist = np.maximum(pairwise_distances(part, self.reference), DISTANCE_FLOOR)
            nbrs, d = _knn(dist, self.n_neighbors)
            reach = np.maximum(d, self.k_distance[nbrs])
            lrd_x = 1.0 / reach.mean(axis=1)
            out.append(self.lrd[nbrs].mean(axis=1) / lrd_x)
        return np.concatenate(out)


def fit_lof(latents: np.ndarray | Sequence[np.ndarray], n_neighbors: int = 20, threshold: float = 1.5) -> LofModel:
    ref = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    if len(ref) <= n_neighbors:
        raise ValueError(f"need more than {n_neighbors} reference latents, got {len(ref)}")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    nbr_parts, d_parts = [], []
    for start in range(0, len(ref), 512):
        dist = np.maximum(pairwise_distances(ref[start:start + 512], ref), DISTANCE_FLOOR)
        # a reference point is not its own neighbour
        dist[np.arange(len(dist)), np.arange(start, start + len(dist))] = np.inf
        n_part, d_part = _knn(dist, n_neighbors)
        nbr_parts.append(n_part)
        d_parts.append(d_part)
    nbrs, d = np.vstack(nbr_parts), np.vstack(d_parts)
    k_distance = d[:, -1]
    reach = np.maximum(d, k_distance[nbrs])
    lrd = 1.0 / reach.mean(axis=1)
    ref = ref.copy()
    ref.setflags(write=False)
    return LofModel(ref, n_neighbors, float(threshold), k_distance, lrd)


def score(model: LofModel, x: np.ndarray) -> float:
    return float(model.scores(np.asarray(x)[None, :])[0])


def classify(model: LofModel, x: np.ndarray) -> int:
    return int(score(model, x) > model.threshold)


def classify_batch(model: LofModel, x: np.ndarray) -> np.ndarray:
    return (model.scores(x) > model.threshold).astype(np.int8)


def write_scores(scores: np.ndarray, labels: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "score", "label"])
        for i, (s, y) in enumerate(zip(scores, labels)):
            writer.writerow([i, repr(float(s)), int(y)])
