"""PR-AUC and lifelong metrics over the task result matrix."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def pr_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-wise average precision; higher score = more anomalous, score ties keep index order."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("pr_auc needs at least one positive and one negative label")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(np.sum(precision[hits == 1]) / n_pos)


def _check(R: np.ndarray, min_c: int = 1) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError("result matrix must be square")
    if R.shape[0] < min_c:
        raise ValueError(f"result matrix needs at least {min_c} tasks")
    return R


def ll_pr_auc(R: np.ndarray) -> float:
    R = _check(R)
    lower = R[np.tril_indices(R.shape[0])]
    if np.isnan(lower).any():
        raise ValueError("lower triangle of the result matrix has unpopulated entries")
    return float(lower.mean())


def bwt(R: np.ndarray) -> float:
    R = _check(R, 2)
    rows, cols = np.tril_indices(R.shape[0], k=-1)
    if np.isnan(R[rows, cols]).any() or np.isnan(np.diag(R)).any():
        raise ValueError("lower triangle of the result matrix has unpopulated entries")
    return float(np.mean(R[rows, cols] - R[cols, cols]))


def fwt(R: np.ndarray) -> float:
    R = _check(R, 2)
    upper = R[np.triu_indices(R.shape[0], k=1)]
    if np.isnan(upper).any():
        raise ValueError("upper triangle of the result matrix has unpopulated entries")
    return float(upper.mean())


def summary(R: np.ndarray) -> dict:
    R = _check(R)
    return {"ll_pr_auc": ll_pr_auc(R), "bwt": bwt(R), "fwt": fwt(R), "c": int(R.shape[0])}


def write_matrix(R: np.ndarray, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(R, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


def read_matrix(path: str | Path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return _check(np.array(rows, dtype=np.float64))


def metrics_json(R: np.ndarray) -> str:
    return json.dumps(summary(R), indent=2, sort_keys=True)
