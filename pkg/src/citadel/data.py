"""Tabular ingestion, min-max normalization and synthetic drifting streams."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class TabularDataset:
    samples: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples.reshape(-1, len(self.feature_names) or 1)
        labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        names = tuple(self.feature_names)
        if samples.shape[0] < 1 or samples.shape[1] < 1:
            raise DataError("empty dataset")
        if samples.shape[0] != labels.shape[0]:
            raise DataError(f"{samples.shape[0]} rows but {labels.shape[0]} labels")
        if samples.shape[1] != len(names):
            raise DataError(f"{samples.shape[1]} columns but {len(names)} feature names")
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if not np.isfinite(samples).all():
            raise DataError("samples contain NaN or infinite values")
        samples.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def subset(self, rows: Sequence[int] | np.ndarray) -> "TabularDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return TabularDataset(self.samples[rows], self.labels[rows], self.feature_names)

    def with_samples(self, samples: np.ndarray) -> "TabularDataset":
        return TabularDataset(samples, self.labels, self.feature_names)

    def normals(self) -> "TabularDataset":
        return self.subset(np.flatnonzero(self.labels == 0))

    def anomalies(self) -> "TabularDataset":
        return self.subset(np.flatnonzero(self.labels == 1))


@dataclass(frozen=True)
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.minimum, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.maximum, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise DataError("min/max length mismatch")
        if (lo > hi).any():
            raise DataError("min must not exceed max")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def d(self) -> int:
        return self.minimum.shape[0]

    @classmethod
    def fit(cls, samples: np.ndarray) -> "NormStats":
        samples = np.asarray(samples, dtype=np.float64)
        return cls(samples.min(axis=0), samples.max(axis=0))

    def apply(self, samples: np.ndarray) -> np.ndarray:
        """Min-max scale to [0, 1], clamping out-of-range values; constant features map to 0."""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.shape[-1] != self.d:
            raise DataError(f"stats cover {self.d} features, data has {samples.shape[-1]}")
        span = self.maximum - self.minimum
        safe = np.where(span > 0, span, 1.0)
        out = (samples - self.minimum) / safe
        out = np.where(span > 0, out, 0.0)
        return np.clip(out, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "NormStats":
        return cls(np.array(payload["min"], dtype=np.float64), np.array(payload["max"], dtype=np.float64))


def load_csv(path: str | Path, label_column: str = "label", normal_value: str = "0") -> TabularDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header")
        label_idx = header.index(label_column)
        feature_cols = [i for i in range(len(header)) if i != label_idx]
        rows: list[list[float]] = []
        labels: list[int] = []
        # row numbers are 1-based file lines, column numbers 1-based header positions
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(record)} cells, expected {len(header)}")
            values = []
            for col in feature_cols:
                cell = record[col].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: cannot parse {cell!r} at row {lineno}, column {col + 1}") from None
            rows.append(values)
            labels.append(0 if record[label_idx].strip() == normal_value else 1)
    if not rows:
        raise DataError(f"{path}: empty dataset")
    names = tuple(header[i] for i in feature_cols)
    samples = np.array(rows, dtype=np.float64)
    if not np.isfinite(samples).all():
        bad = np.argwhere(~np.isfinite(samples))[0]
        raise DataError(f"{path}: non-finite value at row {bad[0] + 2}, column {feature_cols[bad[1]] + 1}")
    return TabularDataset(samples, np.array(labels), names)


def write_csv(ds: TabularDataset, path: str | Path, label_column: str = "label") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*ds.feature_names, label_column])
        for row, label in zip(ds.samples, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def normalize(ds: TabularDataset, stats: NormStats | None = None) -> tuple[TabularDataset, NormStats]:
    if stats is None:
        stats = NormStats.fit(ds.samples)
    return ds.with_samples(stats.apply(ds.samples)), stats


def concat(parts: Sequence[TabularDataset]) -> TabularDataset:
    if not parts:
        raise DataError("nothing to concatenate")
    names = parts[0].feature_names
    for p in parts[1:]:
        if p.feature_names != names:
            raise DataError("feature names differ between datasets")
    return TabularDataset(
        np.vstack([p.samples for p in parts]),
        np.concatenate([p.labels for p in parts]),
        names,
    )


@dataclass(frozen=True)
class StreamSpec:
    concept_count: int = 5
    samples_per_concept: int = 400
    feature_dim: int = 8
    drift_magnitude: float = 1.5
    anomaly_offset: float = 6.0
    seed: int = 7
    anomaly_fraction: float = field(default=0.25)

    def __post_init__(self) -> None:
        if self.concept_count < 2:
            raise DataError("concept_count must be >= 2")
        if self.samples_per_concept < 20:
            raise DataError("samples_per_concept must be >= 20")
        if self.feature_dim < 1:
            raise DataError("feature_dim must be >= 1")
        if self.drift_magnitude < 0 or self.anomaly_offset < 0:
            raise DataError("drift_magnitude and anomaly_offset must be nonnegative")
        if not 0 < self.anomaly_fraction <= 1:
            raise DataError("anomaly_fraction must lie in (0, 1]")

    @property
    def anomalies_per_concept(self) -> int:
        return max(5, int(round(self.anomaly_fraction * self.samples_per_concept)))


SYNTHETIC_NOISE = 0.3


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _anomaly_direction(rng: np.random.Generator, drift_dir: np.ndarray) -> np.ndarray:
    v = rng.standard_normal(len(drift_dir))
    if len(drift_dir) > 1:
        v = v - (v @ drift_dir) * drift_dir
    return _unit(v)


def gen_synthetic_stream(spec: StreamSpec) -> list[tuple[TabularDataset, TabularDataset]]:
    """Gaussian concepts whose means walk along one fixed direction.

    Normal traffic is correlated: a fixed rank-``max(1, d // 4)`` factor model
    plus small isotropic noise, scaled so each feature has roughly unit
    variance. Concept ``i`` has its normal mean at ``i * drift_magnitude * u``.
    Anomalies share that covariance but are centred ``anomaly_offset`` from
    the concept mean along a random per-concept direction, orthogonal to
    ``u`` when ``feature_dim > 1``.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.feature_dim
    names = tuple(f"f{j}" for j in range(d))
    drift_dir = _unit(rng.standard_normal(d))
    rank = max(1, d // 4)
    noise = SYNTHETIC_NOISE
    loadings = rng.standard_normal((d, rank))
    loadings *= np.sqrt(1.0 - noise**2) / np.linalg.norm(loadings, axis=1, keepdims=True)
    n_norm = spec.samples_per_concept
    n_anom = spec.anomalies_per_concept
    stream = []
    for i in range(spec.concept_count):
        mean = i * spec.drift_magnitude * drift_dir
        anom_dir = _anomaly_direction(rng, drift_dir)
        normals = mean + rng.standard_normal((n_norm, rank)) @ loadings.T + noise * rng.standard_normal((n_norm, d))
        anomalies = (mean + spec.anomaly_offset * anom_dir
                     + rng.standard_normal((n_anom, rank)) @ loadings.T + noise * rng.standard_normal((n_anom, d)))
        stream.append(
            (
                TabularDataset(normals, np.zeros(n_norm, dtype=np.int8), names),
                TabularDataset(anomalies, np.ones(n_anom, dtype=np.int8), names),
            )
        )
    return stream


def write_stream(stream: Sequence[tuple[TabularDataset, TabularDataset]], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (normals, anomalies) in enumerate(stream, start=1):
        path = out_dir / f"concept_{i}.csv"
        write_csv(concat([normals, anomalies]), path)
        paths.append(path)
    return paths
