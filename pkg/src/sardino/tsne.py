"""Exact (quadratic) t-SNE for embedding-space layouts.

Per-point Gaussian bandwidths are found by bisection so each conditional
distribution hits the target perplexity: H_bits(P_i) = log2(perplexity)
within 1e-4. The joint P is the symmetrized, normalized conditional matrix;
the 2D layout uses the Student-t kernel, gradient descent with momentum
(0.5 until iteration 250, 0.8 after) and x12 early exaggeration for the
first 250 iterations. Analysis caps at a couple thousand points per region,
so no tree approximation is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError

__all__ = ["TsneLayout", "tsne_fit", "conditional_entropy_bits"]

ENTROPY_TOL_BITS = 1e-4
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
MOMENTUM_SWITCH = 250
_EPS = 1e-12


@dataclass
class TsneLayout:
    coords: np.ndarray  # (n, 2)
    kl: float  # final KL(P || Q), exaggeration removed
    initial_kl: float
    perplexity: float
    iterations: int


def _row_distribution(d2_row: np.ndarray, beta: float, self_idx: int) -> np.ndarray:
    """Conditional p_{j|i} for one point at precision beta = 1/(2 sigma^2)."""
    p = np.exp(-beta * (d2_row - d2_row.min()))
    p[self_idx] = 0.0
    total = p.sum()
    if total <= 0:
        return p
    return p / total


def conditional_entropy_bits(p_row: np.ndarray) -> float:
    """Shannon entropy (bits) of one conditional distribution."""
    nz = p_row[p_row > 0]
    return float(-(nz * np.log2(nz)).sum())


def _bisect_beta(d2_row: np.ndarray, self_idx: int, target_bits: float) -> tuple:
    """Find beta so the conditional entropy hits the target within tolerance."""
    lo, hi = 0.0, np.inf
    beta = 1.0
    p = _row_distribution(d2_row, beta, self_idx)
    for _ in range(200):
        h = conditional_entropy_bits(p)
        if abs(h - target_bits) < ENTROPY_TOL_BITS:
            break
        if h > target_bits:  # too flat: sharpen
            lo = beta
            beta = beta * 2.0 if not np.isfinite(hi) else (lo + hi) / 2.0
        else:
            hi = beta
            beta = beta / 2.0 if lo == 0.0 else (lo + hi) / 2.0
        p = _row_distribution(d2_row, beta, self_idx)
    return beta, p


def _joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    n = x.shape[0]
    sq = (x**2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    if d2[~np.eye(n, dtype=bool)].max() <= 0:
        raise DataError("all points are identical; t-SNE geometry is degenerate")
    target_bits = float(np.log2(perplexity))
    p_cond = np.zeros((n, n))
    for i in range(n):
        _, p_cond[i] = _bisect_beta(d2[i], i, target_bits)
    p = (p_cond + p_cond.T) / (2.0 * n)
    return p


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def _q_matrix(y: np.ndarray) -> tuple:
    sq = (y**2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (y @ y.T), 0.0)
    w = 1.0 / (1.0 + d2)
    np.fill_diagonal(w, 0.0)
    q = np.maximum(w / w.sum(), _EPS)
    return q, w


def tsne_fit(embeddings, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
             learning_rate: float = 200.0) -> TsneLayout:
    """2D layout of an EmbeddingSet (or raw (n, d) matrix)."""
    x = np.asarray(getattr(embeddings, "vectors", embeddings), dtype=np.float64)
    n = x.shape[0]
    if n <= 3 * perplexity:
        raise ParameterError(f"need n > 3 * perplexity, got n={n}, perplexity={perplexity}")
    p = _joint_probabilities(x, perplexity)

    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    q0, _ = _q_matrix(y)
    initial_kl = _kl(p, q0)

    for it in range(iterations):
        p_eff = p * EXAGGERATION if it < EXAGGERATION_ITERS else p
        q, w = _q_matrix(y)
        # grad_i = 4 sum_j (p_ij - q_ij) w_ij (y_i - y_j)
        pq_w = (p_eff - q) * w
        grad = 4.0 * ((np.diag(pq_w.sum(axis=1)) - pq_w) @ y)
        momentum = MOMENTUM_EARLY if it < MOMENTUM_SWITCH else MOMENTUM_LATE
        velocity = momentum * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)

    q, _ = _q_matrix(y)
    return TsneLayout(
        coords=y, kl=_kl(p, q), initial_kl=initial_kl, perplexity=perplexity,
        iterations=iterations,
    )
