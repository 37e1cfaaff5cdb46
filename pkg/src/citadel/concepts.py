"""Concept creation: cluster normals and anomalies, greedily pair them, split per task."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DataError, TabularDataset
from .kmeans import kmeans


@dataclass(frozen=True)
class ConceptSet:
    normals: TabularDataset
    anomalies: TabularDataset
    normal_clusters: tuple[np.ndarray, ...]  # row indices into ``normals``
    anomaly_clusters: tuple[np.ndarray, ...]

    @property
    def c(self) -> int:
        return len(self.normal_clusters)

    def normal_centroids(self) -> np.ndarray:
        return np.array([self.normals.samples[rows].mean(axis=0) for rows in self.normal_clusters])

    def anomaly_centroids(self) -> np.ndarray:
        return np.array([self.anomalies.samples[rows].mean(axis=0) for rows in self.anomaly_clusters])


@dataclass(frozen=True)
class Task:
    index: int
    normal_train: np.ndarray  # row indices into the ConceptSet's normals
    normal_test: np.ndarray
    anomaly_train: np.ndarray  # row indices into the ConceptSet's anomalies
    anomaly_test: np.ndarray

    def manifest(self) -> dict:
        return {
            "task": self.index,
            "normal_train": self.normal_train.tolist(),
            "normal_test": self.normal_test.tolist(),
            "anomaly_train": self.anomaly_train.tolist(),
            "anomaly_test": self.anomaly_test.tolist(),
        }


def _ordered_clusters(X: np.ndarray, labels: np.ndarray, c: int) -> tuple[np.ndarray, ...]:
    # descending size, then lexicographic centroid
    groups = [np.flatnonzero(labels == j) for j in range(c)]
    keys = [(-len(g), tuple(X[g].mean(axis=0)) if len(g) else ()) for g in groups]
    order = sorted(range(c), key=lambda j: keys[j])
    return tuple(groups[j] for j in order)


def concept_set_from_labels(normals: TabularDataset, anomalies: TabularDataset,
                            normal_labels: np.ndarray, anomaly_labels: np.ndarray) -> ConceptSet:
    """ConceptSet from known memberships; clusters keep their label order."""
    c = int(max(normal_labels.max(), anomaly_labels.max())) + 1
    n_groups = tuple(np.flatnonzero(normal_labels == j) for j in range(c))
    a_groups = tuple(np.flatnonzero(anomaly_labels == j) for j in range(c))
    if any(len(g) == 0 for g in n_groups + a_groups):
        raise DataError("every concept needs at least one normal and one anomaly sample")
    return ConceptSet(normals, anomalies, n_groups, a_groups)


def cluster_concepts(normals: TabularDataset, anomalies: TabularDataset, c: int = 5, seed: int = 0) -> ConceptSet:
    if c < 1:
        raise DataError("c must be >= 1")
    if normals.n < c or anomalies.n < c:
        raise DataError(f"need at least {c} normal and {c} anomaly samples")
    seeds = np.random.SeedSequence(seed).generate_state(2)
    n_fit = kmeans(normals.samples, c, seed=int(seeds[0]))
    a_fit = kmeans(anomalies.samples, c, seed=int(seeds[1]))
    return ConceptSet(
        normals,
        anomalies,
        _ordered_clusters(normals.samples, n_fit.labels, c),
        _ordered_clusters(anomalies.samples, a_fit.labels, c),
    )


def match_concepts(cs: ConceptSet) -> list[tuple[int, int]]:
    """Greedy nearest-centroid pairing; normal concepts are visited in index order."""
    if len(cs.normal_clusters) != len(cs.anomaly_clusters):
        raise DataError("normal and anomaly concept counts differ")
    mu_n = cs.normal_centroids()
    mu_a = cs.anomaly_centroids()
    remaining = list(range(len(mu_a)))
    pairs = []
    for i in range(len(mu_n)):
        dists = [float(np.linalg.norm(mu_n[i] - mu_a[j])) for j in remaining]
        j_star = remaining[int(np.argmin(dists))]
        pairs.append((i, j_star))
        remaining.remove(j_star)
    return pairs


def split_rows(rows: np.ndarray, train_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must lie in (0, 1)")
    if len(rows) < 2:
        raise DataError(f"cannot split {len(rows)} sample(s) into non-empty train and test sets")
    shuffled = np.asarray(rows)[rng.permutation(len(rows))]
    n_train = math.ceil(train_fraction * len(rows) - 1e-9)
    n_train = min(n_train, len(rows) - 1)
    return np.sort(shuffled[:n_train]), np.sort(shuffled[n_train:])


def split_task(cs: ConceptSet, pair: tuple[int, int], task_index: int, train_fraction: float = 0.7, seed: int = 0) -> Task:
    rng = np.random.default_rng(seed)
    n_train, n_test = split_rows(cs.normal_clusters[pair[0]], train_fraction, rng)
    a_train, a_test = split_rows(cs.anomaly_clusters[pair[1]], train_fraction, rng)
    return Task(task_index, n_train, n_test, a_train, a_test)


def tasks_manifest(tasks: Sequence[Task], pairs: Sequence[tuple[int, int]]) -> str:
    return json.dumps(
        {"schema": 1, "tasks": [dict(t.manifest(), normal_concept=p[0], anomaly_concept=p[1]) for t, p in zip(tasks, pairs)]},
        indent=2,
    )
