"""PCA loading-based feature ranking and top-k selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError, TabularDataset


@dataclass(frozen=True)
class PcaModel:
    components: np.ndarray  # (M, d), rows are orthonormal loadings
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    eigenvalues: np.ndarray  # full spectrum of the sample covariance, descending


@dataclass(frozen=True)
class FeatureRanking:
    scores: np.ndarray
    order: np.ndarray
    feature_names: tuple[str, ...]

    def restrict(self, columns: np.ndarray) -> "FeatureRanking":
        """Ranking over a column subset, re-indexed to that subset's positions."""
        columns = np.asarray(columns, dtype=np.int64)
        scores = self.scores[columns]
        order = np.lexsort((np.arange(len(scores)), -scores))
        return FeatureRanking(scores, order, tuple(self.feature_names[i] for i in columns))

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["feature_name", "score", "rank"])
            for rank, idx in enumerate(self.order, start=1):
                writer.writerow([self.feature_names[idx], repr(float(self.scores[idx])), rank])


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each row made positive; first index wins on ties
    pivots = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), pivots])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def fit_pca(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigendecomposition of the (n-1)-normalised sample covariance.

    Returns (eigenvalues descending, unit eigenvectors as rows, mean).
    """
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (samples.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    return evals, _canonical_signs(evecs[:, order].T), mean


def rank_features(train_normals: TabularDataset, variance_threshold: float = 0.95) -> tuple[PcaModel, FeatureRanking]:
    if not 0 < variance_threshold <= 1:
        raise DataError("variance_threshold must lie in (0, 1]")
    if (train_normals.labels != 0).any():
        raise DataError("feature ranking must be fitted on normal (label 0) rows only")
    if train_normals.n < 2:
        raise DataError("need at least 2 samples for PCA")
    evals, evecs, mean = fit_pca(train_normals.samples)
    total = evals.sum()
    if total <= 0:
        raise DataError("zero-variance dataset: all rows identical")
    ratio = evals / total
    cumulative = np.cumsum(ratio)
    # guard against cumulative sums landing a hair below 1.0
    m = int(np.searchsorted(cumulative, variance_threshold - 1e-12) + 1)
    m = min(m, len(evals))
    components = evecs[:m]
    scores = np.abs(components).sum(axis=0)
    order = np.lexsort((np.arange(len(scores)), -scores))
    pca = PcaModel(components, ratio[:m], mean, evals)
    return pca, FeatureRanking(scores, order, train_normals.feature_names)


def select_top_k(ds: TabularDataset, ranking: FeatureRanking, k: int = 31) -> TabularDataset:
    if k < 1 or k > ds.d:
        raise DataError(f"k must lie in [1, {ds.d}], got {k}")
    if len(ranking.order) != ds.d:
        raise DataError("ranking does not match dataset width")
    keep = ranking.order[:k]
    return TabularDataset(ds.samples[:, keep], ds.labels, tuple(ds.feature_names[i] for i in keep))


def selected_indices(ranking: FeatureRanking, k: int) -> np.ndarray:
    return np.asarray(ranking.order[:k], dtype=np.int64)
