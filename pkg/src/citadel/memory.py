"""Replay memory for continual learning.

Histogram-KL forgetting and sampling, Kolmogorov-Smirnov drift scoring and a
capacity-bounded buffer whose levels receive geometrically decaying shares.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kmeans import kmeans

DEFAULT_BINS = 20
KL_EPS = 1e-8


# ---------------------------------------------------------------- histograms


@dataclass(frozen=True)
class FeatureHistograms:
    edges: np.ndarray  # (d, b + 1)
    masses: np.ndarray  # (d, b)

    @property
    def bins(self) -> int:
        return self.masses.shape[1]

    def normalized(self) -> np.ndarray:
        totals = self.masses.sum(axis=1, keepdims=True)
        return np.divide(self.masses, totals, out=np.zeros_like(self.masses), where=totals > 0)


def union_edges(arrays: Sequence[np.ndarray], b: int = DEFAULT_BINS) -> np.ndarray:
    """Equal-width edges per feature spanning the joint range of all arrays."""
    stacked = np.vstack([np.atleast_2d(a) for a in arrays if len(a)])
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    flat = hi <= lo
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    return np.linspace(lo, hi, b + 1, axis=1)


def _check_edges(edges: np.ndarray) -> None:
    if edges.ndim != 2 or edges.shape[1] < 2:
        raise ValueError("edges must be a (d, b+1) array with b >= 1")
    if not (np.diff(edges, axis=1) > 0).all():
        raise ValueError("bin edges must be strictly ascending")


def bin_indices(X: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin of every value; values outside the edges fall into the end bins."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    b = edges.shape[1] - 1
    out = np.empty(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        out[:, j] = np.searchsorted(edges[j], X[:, j], side="right") - 1
    return np.clip(out, 0, b - 1)


def _bin_masses(bins: np.ndarray, b: int, weights: np.ndarray | None) -> np.ndarray:
    n, d = bins.shape
    flat = (bins + b * np.arange(d)).ravel()
    w = None if weights is None else np.repeat(np.asarray(weights, dtype=np.float64), d)
    return np.bincount(flat, weights=w, minlength=d * b).reshape(d, b).astype(np.float64)


def feature_histograms(X: np.ndarray, edges: np.ndarray, weights: np.ndarray | None = None) -> FeatureHistograms:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    _check_edges(edges)
    if edges.shape[0] != X.shape[1]:
        raise ValueError("one row of edges per feature required")
    if weights is not None and len(weights) != len(X):
        raise ValueError("weights length must match the number of rows")
    b = edges.shape[1] - 1
    return FeatureHistograms(edges, _bin_masses(bin_indices(X, edges), b, weights))


def smooth(masses: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """Normalise along the last axis, add ``eps`` and renormalise. All-zero rows become uniform."""
    masses = np.asarray(masses, dtype=np.float64)
    totals = masses.sum(axis=-1, keepdims=True)
    p = np.divide(masses, totals, out=np.zeros_like(masses), where=totals > 0)
    return (p + eps) / (1.0 + eps * masses.shape[-1])


def kl_divergence(P: np.ndarray, Q: np.ndarray, eps: float = KL_EPS) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError("P and Q lengths differ")
    if (P < 0).any() or (Q < 0).any():
        raise ValueError("P and Q must be nonnegative")
    if eps <= 0:
        raise ValueError("eps must be positive")
    p, q = smooth(P, eps), smooth(Q, eps)
    return max(float(np.sum(p * np.log(p / q))), 0.0)


# ---------------------------------------------------------------- KL objective


class WeightedKLObjective:
    """Sum over features of KL(target_j || smooth(base_j + weighted histogram_j(w))).

    ``base`` is a fixed (d, b) mass array (zero for forgetting, the temporary
    buffer's histogram for sampling); ``bins`` gives the bin of each weighted
    sample in each feature.
    """

    def __init__(self, target: np.ndarray, bins: np.ndarray, base: np.ndarray | None = None, eps: float = KL_EPS):
        self.p = smooth(target, eps)
        self.bins = bins
        d, b = self.p.shape
        self.b = b
        self.base = np.zeros((d, b)) if base is None else np.asarray(base, dtype=np.float64)
        self.eps = eps
        self._flat = bins + b * np.arange(d)

    def _masses(self, w: np.ndarray) -> np.ndarray:
        return self.base + _bin_masses(self.bins, self.b, w)

    def value(self, w: np.ndarray) -> float:
        q = smooth(self._masses(w), self.eps)
        return float(np.sum(self.p * np.log(self.p / q)))

    def gradient(self, w: np.ndarray) -> np.ndarray:
        A = self._masses(w)
        S = np.maximum(A.sum(axis=1, keepdims=True), 1e-300)
        q = (A / S + self.eps) / (1.0 + self.eps * self.b)
        ratio = self.p / q
        # d KL_j / d A_{j,u}
        dA = (-ratio + np.sum(ratio * A / S, axis=1, keepdims=True)) / (S * (1.0 + self.eps * self.b))
        return dA.ravel()[self._flat].sum(axis=1)


@dataclass(frozen=True)
class OptimResult:
    weights: np.ndarray
    objective: float
    history: tuple[float, ...]
    iterations: int


def projected_gradient_descent(
    objective: WeightedKLObjective,
    w0: np.ndarray,
    step: float = 0.05,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> OptimResult:
    """Box-constrained descent on [0, 1]^n; each iteration halves the step until the objective does not increase.

    The gradient is multiplied by the number of weights: the histograms are
    normalised, so raw partial derivatives shrink like 1/n and a fixed step
    would otherwise stall on large buffers.
    """
    w = np.clip(np.asarray(w0, dtype=np.float64).copy(), 0.0, 1.0)
    f = objective.value(w)
    history = [f]
    scale = float(len(w))
    base_step = step
    it = 0
    for it in range(1, max_iter + 1):
        g = objective.gradient(w) * scale
        # backtrack from the base step each iteration
        step = base_step
        while True:
            cand = np.clip(w - step * g, 0.0, 1.0)
            fc = objective.value(cand)
            if fc <= f or step < 1e-12:
                break
            step *= 0.5
        if fc > f:
            break
        improvement = f - fc
        w, f = cand, fc
        history.append(f)
        # a backtracked step says nothing about convergence: near zero weights the
        # smoothed objective has a sharp kink that forces tiny steps now and then
        if improvement < tol and step == base_step:
            break
    return OptimResult(w, f, tuple(history), it)


def _k_smallest(w: np.ndarray, k: int) -> np.ndarray:
    return np.lexsort((np.arange(len(w)), w))[:k]


def _k_largest(w: np.ndarray, k: int) -> np.ndarray:
    return np.lexsort((np.arange(len(w)), -w))[:k]


# ---------------------------------------------------------------- temp buffer


@dataclass(frozen=True)
class TempBuffer:
    """Working copy of the memory plus admitted new samples.

    ``entry_ids`` holds the memory id of every copied entry (-1 for newly
    admitted rows); ``new_rows`` holds the row in the incoming batch (-1 for
    copied entries). ``origin_ids`` remembers everything that was copied so
    the memory can tell which entries were forgotten.
    """

    samples: np.ndarray
    entry_ids: np.ndarray
    new_rows: np.ndarray
    origin_ids: np.ndarray

    @classmethod
    def from_memory(cls, samples: np.ndarray, ids: np.ndarray) -> "TempBuffer":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(np.asarray(samples, dtype=np.float64), ids, np.full(len(ids), -1, dtype=np.int64), ids.copy())

    @classmethod
    def from_new(cls, samples: np.ndarray, d: int | None = None) -> "TempBuffer":
        samples = np.asarray(samples, dtype=np.float64)
        n = len(samples)
        return cls(samples, np.full(n, -1, dtype=np.int64), np.arange(n, dtype=np.int64), np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.samples)

    def drop(self, rows: np.ndarray) -> "TempBuffer":
        keep = np.setdiff1d(np.arange(len(self)), rows)
        return TempBuffer(self.samples[keep], self.entry_ids[keep], self.new_rows[keep], self.origin_ids)

    def admit(self, X_new: np.ndarray, rows: np.ndarray) -> "TempBuffer":
        rows = np.asarray(rows, dtype=np.int64)
        return TempBuffer(
            np.vstack([self.samples, X_new[rows]]) if len(self) else X_new[rows].copy(),
            np.concatenate([self.entry_ids, np.full(len(rows), -1, dtype=np.int64)]),
            np.concatenate([self.new_rows, rows]),
            self.origin_ids,
        )

    def admitted(self) -> np.ndarray:
        return self.samples[self.new_rows >= 0]

    def forgotten_ids(self) -> np.ndarray:
        return np.setdiff1d(self.origin_ids, self.entry_ids[self.entry_ids >= 0])


def strategic_forget(temp: TempBuffer, X_new: np.ndarray, b: int = DEFAULT_BINS, quota: int = 1000,
                     **pgd) -> tuple[np.ndarray, np.ndarray, TempBuffer, OptimResult]:
    """Drop ``quota`` buffer entries whose removal best aligns the buffer with the new data.

    Returns (optimised weights, dropped rows, updated buffer, optimiser trace).
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
    if len(X_new) == 0:
        raise ValueError("new data is empty")
    if quota < 1 or quota >= len(temp):
        raise ValueError(f"forgetting quota {quota} must lie in [1, {len(temp) - 1}]")
    edges = union_edges([temp.samples, X_new], b)
    target = _bin_masses(bin_indices(X_new, edges), b, None)
    objective = WeightedKLObjective(target, bin_indices(temp.samples, edges))
    result = projected_gradient_descent(objective, np.ones(len(temp)), **pgd)
    # rows below 0.5 sort first, so taking the k smallest both pads and truncates the w < 0.5 set
    drop = np.sort(_k_smallest(result.weights, quota))
    return result.weights, drop, temp.drop(drop), result


def strategic_sample(temp: TempBuffer, X_new: np.ndarray, b: int = DEFAULT_BINS, quota: int = 1000,
                     **pgd) -> tuple[np.ndarray, np.ndarray, TempBuffer, OptimResult]:
    """Admit the ``quota`` new samples that best complete the merged distribution."""
    X_new = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
    m = len(X_new)
    if quota < 1 or quota > m:
        raise ValueError(f"sampling quota {quota} must lie in [1, {m}]")
    edges = union_edges([temp.samples, X_new], b)
    new_bins = bin_indices(X_new, edges)
    target = _bin_masses(new_bins, b, None)
    base = _bin_masses(bin_indices(temp.samples, edges), b, None) if len(temp) else None
    # the 1/2 of the symmetrised mixture cancels under normalisation
    objective = WeightedKLObjective(target, new_bins, base)
    result = projected_gradient_descent(objective, np.full(m, 0.5), **pgd)
    select = np.sort(_k_largest(result.weights, quota))
    return result.weights, select, temp.admit(X_new, select), result


# ---------------------------------------------------------------- drift


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_critical_coefficient(alpha: float) -> float:
    return math.sqrt(-0.5 * math.log(alpha / 2.0))


@dataclass(frozen=True)
class DriftReport:
    drifted: bool
    severity: float
    statistics: np.ndarray
    critical_value: float


def detect_drift(X_new: np.ndarray, memory_samples: np.ndarray, alpha: float = 0.05) -> DriftReport:
    X_new = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
    mem = np.atleast_2d(np.asarray(memory_samples, dtype=np.float64))
    if len(X_new) == 0 or mem.size == 0:
        raise ValueError("drift detection needs non-empty new data and memory")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    stats = np.array([ks_statistic(X_new[:, j], mem[:, j]) for j in range(X_new.shape[1])])
    n, m = len(X_new), len(mem)
    critical = ks_critical_coefficient(alpha) * math.sqrt((n + m) / (n * m))
    return DriftReport(bool((stats > critical).any()), float(stats.mean()), stats, critical)


# ---------------------------------------------------------------- levels


def assign_level(s: float, lam: float = 5.5, l_min: int = 1, l_max: int = 10) -> int:
    if l_min > l_max:
        raise ValueError("l_min must not exceed l_max")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    s = min(max(float(s), 0.0), 1.0)
    frac = math.expm1(lam * s) / math.expm1(lam)
    return int(math.floor(l_min + (l_max - l_min) * frac + 0.5))


def level_allocations(capacity: int, n_levels: int, gamma: float = 2.0) -> list[int]:
    """Geometric shares of ``capacity``, rounded by largest remainder so they sum exactly."""
    if gamma <= 1:
        raise ValueError("gamma must exceed 1")
    if n_levels < 1:
        raise ValueError("need at least one level")
    weights = np.array([gamma ** -(lvl - 1) for lvl in range(1, n_levels + 1)])
    exact = capacity * weights / weights.sum()
    alloc = np.floor(exact).astype(np.int64)
    remainder = capacity - int(alloc.sum())
    order = np.lexsort((np.arange(n_levels), -(exact - alloc)))
    alloc[order[:remainder]] += 1
    return [int(a) for a in alloc]


def downsize(X: np.ndarray, target: int, n_clusters: int = 5, seed: int = 0) -> np.ndarray:
    """Rows (ascending) of the ``target`` samples nearest to any k-means centroid."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if target > len(X):
        raise ValueError(f"cannot keep {target} of {len(X)} rows")
    if target < 0:
        raise ValueError("target must be nonnegative")
    if target == len(X):
        return np.arange(len(X))
    if target == 0:
        return np.empty(0, dtype=np.int64)
    fit = kmeans(X, min(n_clusters, len(X)), seed=seed)
    nearest = np.sqrt(((X - fit.centroids[fit.labels]) ** 2).sum(axis=1))
    return np.sort(np.lexsort((np.arange(len(X)), nearest))[:target])


# ---------------------------------------------------------------- hierarchical memory


@dataclass
class Buffer:
    task: int
    marked: bool
    samples: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    def keep(self, rows: np.ndarray) -> None:
        self.samples = self.samples[rows]
        self.ids = self.ids[rows]


@dataclass
class HierarchicalMemory:
    capacity: int
    n_levels: int = 10
    gamma: float = 2.0
    n_clusters: int = 5
    levels: list[list[Buffer]] = field(default_factory=list)
    _next_id: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        self.allocations = level_allocations(self.capacity, self.n_levels, self.gamma)
        if not self.levels:
            self.levels = [[] for _ in range(self.n_levels)]

    def _new_ids(self, n: int) -> np.ndarray:
        ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        return ids

    def __len__(self) -> int:
        return sum(len(buf) for level in self.levels for buf in level)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def level_sizes(self) -> list[int]:
        return [sum(len(buf) for buf in level) for level in self.levels]

    def flatten(self, include_marked: bool = True) -> tuple[np.ndarray, np.ndarray]:
        parts = [buf for level in self.levels for buf in level if include_marked or not buf.marked]
        parts = [buf for buf in parts if len(buf)]
        if not parts:
            return np.empty((0, 0)), np.empty(0, dtype=np.int64)
        return np.vstack([buf.samples for buf in parts]), np.concatenate([buf.ids for buf in parts])

    def temp_buffer(self) -> TempBuffer:
        samples, ids = self.flatten()
        return TempBuffer.from_memory(samples, ids)

    def initialize(self, X_first: np.ndarray, task_index: int = 1, seed: int = 0) -> None:
        """Genuine copy of the first concept on level 1, marked placeholder copies above."""
        X_first = np.atleast_2d(np.asarray(X_first, dtype=np.float64))
        if not self.empty:
            raise ValueError("memory already initialised")
        for lvl, alloc in enumerate(self.allocations):
            rows = downsize(X_first, min(alloc, len(X_first)), self.n_clusters, seed + lvl)
            if len(rows) == 0:
                continue
            self.levels[lvl].append(Buffer(task_index, lvl > 0, X_first[rows], self._new_ids(len(rows))))

    def remove_ids(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            return
        for level in self.levels:
            for buf in level:
                buf.keep(np.flatnonzero(~np.isin(buf.ids, ids)))
            level[:] = [buf for buf in level if len(buf)]

    def integrate(self, temp: TempBuffer, level: int, task_index: int, seed: int = 0) -> None:
        """Apply the temp buffer's forgetting, then file its admitted samples at ``level`` (1-based)."""
        if not 1 <= level <= self.n_levels:
            raise ValueError(f"level {level} outside [1, {self.n_levels}]")
        self.remove_ids(temp.forgotten_ids())
        slot = self.levels[level - 1]
        slot[:] = [buf for buf in slot if not buf.marked]
        incoming = temp.admitted()
        if len(incoming):
            slot.append(Buffer(task_index, False, incoming, self._new_ids(len(incoming))))
        if not slot:
            return
        alloc = self.allocations[level - 1]
        shares = [alloc // len(slot) + (1 if i < alloc % len(slot) else 0) for i in range(len(slot))]
        for i, (buf, share) in enumerate(zip(slot, shares)):
            if len(buf) > share:
                buf.keep(downsize(buf.samples, share, self.n_clusters, seed + i))
        slot[:] = [buf for buf in slot if len(buf)]

    def audit(self) -> dict:
        return {
            "capacity": self.capacity,
            "total": len(self),
            "levels": [
                {
                    "level": lvl + 1,
                    "allocation": self.allocations[lvl],
                    "size": sum(len(buf) for buf in level),
                    "buffers": [{"task": buf.task, "marked": buf.marked, "count": len(buf)} for buf in level],
                }
                for lvl, level in enumerate(self.levels)
            ],
        }

    def dump(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.audit(), indent=2), encoding="utf-8")
        if csv_path is None:
            return
        with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            d = next((buf.samples.shape[1] for level in self.levels for buf in level), 0)
            writer.writerow(["level", "task", "marked", "id", *[f"x{j}" for j in range(d)]])
            for lvl, level in enumerate(self.levels, start=1):
                for buf in level:
                    for sid, row in zip(buf.ids, buf.samples):
                        writer.writerow([lvl, buf.task, int(buf.marked), int(sid), *[repr(float(v)) for v in row]])


@dataclass
class FlatMemory:
    """Single capacity-bounded buffer with no levels (ablation without the hierarchy)."""

    capacity: int
    n_clusters: int = 5
    samples: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    tasks: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    _next_id: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def empty(self) -> bool:
        return len(self) == 0

    def flatten(self, include_marked: bool = True) -> tuple[np.ndarray, np.ndarray]:
        return self.samples, self.ids

    def temp_buffer(self) -> TempBuffer:
        return TempBuffer.from_memory(self.samples, self.ids)

    def _append(self, X: np.ndarray, task_index: int) -> None:
        ids = np.arange(self._next_id, self._next_id + len(X), dtype=np.int64)
        self._next_id += len(X)
        self.samples = np.vstack([self.samples, X]) if len(self) else X.copy()
        self.ids = np.concatenate([self.ids, ids])
        self.tasks = np.concatenate([self.tasks, np.full(len(X), task_index, dtype=np.int64)])

    def _fit_capacity(self, seed: int) -> None:
        if len(self) > self.capacity:
            rows = downsize(self.samples, self.capacity, self.n_clusters, seed)
            self.samples, self.ids, self.tasks = self.samples[rows], self.ids[rows], self.tasks[rows]

    def initialize(self, X_first: np.ndarray, task_index: int = 1, seed: int = 0) -> None:
        self._append(np.atleast_2d(np.asarray(X_first, dtype=np.float64)), task_index)
        self._fit_capacity(seed)

    def integrate(self, temp: TempBuffer, level: int, task_index: int, seed: int = 0) -> None:
        keep = ~np.isin(self.ids, temp.forgotten_ids())
        self.samples, self.ids, self.tasks = self.samples[keep], self.ids[keep], self.tasks[keep]
        incoming = temp.admitted()
        if len(incoming):
            self._append(incoming, task_index)
        self._fit_capacity(seed)

    def audit(self) -> dict:
        tasks, counts = np.unique(self.tasks, return_counts=True)
        return {
            "capacity": self.capacity,
            "total": len(self),
            "levels": [{"level": 1, "allocation": self.capacity, "size": len(self),
                        "buffers": [{"task": int(t), "marked": False, "count": int(c)} for t, c in zip(tasks, counts)]}],
        }

    def dump(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.audit(), indent=2), encoding="utf-8")
