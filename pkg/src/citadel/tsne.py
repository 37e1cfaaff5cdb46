"""Exact-gradient t-SNE for small point sets (tens of points)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MACHINE_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class TsneParams:
    perplexity: float | None = None  # None -> min(10, (k - 1) // 3)
    n_iter: int = 500
    learning_rate: float = 100.0
    early_exaggeration: float = 4.0
    exaggeration_iters: int = 100
    init_scale: float = 1e-4

    def resolve_perplexity(self, k: int) -> float:
        if self.perplexity is not None:
            return float(self.perplexity)
        return float(max(1, min(10, (k - 1) // 3)))


def _conditional_p(sq_dist: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 200) -> np.ndarray:
    n = sq_dist.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(sq_dist[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_steps):
            # shift by the minimum so exp never underflows to an all-zero row
            p = np.exp(-(d - d.min()) * beta)
            total = p.sum()
            p /= total
            entropy = np.log(total) + beta * (p @ (d - d.min()))
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p
    return P


def joint_probabilities(points: np.ndarray, perplexity: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    sq = np.sum(points**2, axis=1)
    sq_dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    P = _conditional_p(sq_dist, perplexity)
    P = P + P.T
    return np.maximum(P / P.sum(), _MACHINE_EPS)


def kl_and_gradient(Y: np.ndarray, P: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P || Q) of the Student-t embedding and its gradient w.r.t. Y."""
    diff = Y[:, None, :] - Y[None, :, :]
    num = 1.0 / (1.0 + np.sum(diff**2, axis=2))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), _MACHINE_EPS)
    off = ~np.eye(len(Y), dtype=bool)
    kl = float(np.sum(P[off] * np.log(P[off] / Q[off])))
    W = (P - Q) * num
    grad = 4.0 * np.einsum("ij,ijk->ik", W, diff)
    return kl, grad


def tsne(points: np.ndarray, params: TsneParams, rng: np.random.Generator) -> np.ndarray:
    """Embed the rows of ``points`` in the plane."""
    points = np.asarray(points, dtype=np.float64)
    k = points.shape[0]
    if k == 1:
        return np.zeros((1, 2))
    perplexity = params.resolve_perplexity(k)
    if not perplexity < k:
        raise ValueError(f"perplexity {perplexity} must be below the point count {k}")
    P = joint_probabilities(points, perplexity)
    Y = params.init_scale * rng.standard_normal((k, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(params.n_iter):
        exaggerating = it < params.exaggeration_iters
        momentum = 0.5 if exaggerating else 0.8
        _, grad = kl_and_gradient(Y, P * params.early_exaggeration if exaggerating else P)
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        update = momentum * update - params.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
    return Y
