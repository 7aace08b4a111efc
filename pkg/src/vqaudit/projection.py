"""Exact O(n^2) t-SNE for projecting crop descriptors to 2-D."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import ConfigurationError, NumericalError

P_FLOOR = 1e-12
JITTER = 1e-9


@dataclass
class Calibration:
    sigma: float
    probs: np.ndarray
    perplexity: float  # achieved 2**H
    iterations: int


@dataclass
class AffinityMatrix:
    P: np.ndarray


@dataclass
class TSNEConfig:
    perplexity: float = 30.0
    iters: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0
    init_std: float = 1e-4
    kl_every: int = 10


@dataclass
class EmbeddingLayout:
    coords: np.ndarray
    labels: np.ndarray
    kl: float
    kl_history: list = field(default_factory=list)  # (iteration, KL)


def _row_probs(d, beta):
    # shift by the smallest distance so exp never underflows to all zeros
    e = np.exp(-(d - d.min()) * beta)
    p = e / e.sum()
    nz = p[p > 0]
    h = float(-(nz * np.log2(nz)).sum())
    return p, h


def perplexity_calibrate(sq_dists, perplexity, tol=1e-3, max_iter=100):
    """Binary search for the Gaussian bandwidth matching ``perplexity``.

    ``sq_dists`` holds squared distances from one point to every *other*
    point. Stops once |2**H - perplexity| <= tol * perplexity.
    """
    d = np.asarray(sq_dists, dtype=np.float64)
    if d.size < 1:
        raise ConfigurationError("calibration needs at least one neighbour (n >= 2)")
    if perplexity <= 0 or perplexity >= d.size + 1:
        raise ConfigurationError(f"perplexity {perplexity} must lie in (0, n) for n={d.size + 1}")
    if not np.any(d > 0):
        raise ConfigurationError("all points in this row are identical; deduplicate or jitter the input first")
    spread = float(np.mean(d[d > 0]))
    beta, lo, hi = 1.0 / spread, 0.0, np.inf
    best = None
    for it in range(1, max_iter + 1):
        p, h = _row_probs(d, beta)
        achieved = 2.0 ** h
        err = abs(achieved - perplexity)
        if best is None or err < best[0]:
            best = (err, beta, p, achieved, it)
        if err <= tol * perplexity:
            break
        if achieved > perplexity:  # too flat: sharpen
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (beta + lo) / 2.0
    _, beta, p, achieved, it = best
    return Calibration(float(np.sqrt(1.0 / (2.0 * beta))), p, float(achieved), it)


def squared_distances(X):
    return squareform(pdist(np.asarray(X, dtype=np.float64), "sqeuclidean"))


def jitter_duplicates(X, seed=0, scale=JITTER):
    """Perturb repeated rows by ``scale`` so no two points coincide."""
    X = np.array(X, dtype=np.float64)
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    dup = np.ones(len(X), dtype=bool)
    dup[first] = False
    if dup.any():
        rng = np.random.Generator(np.random.PCG64(seed))
        X[dup] += rng.normal(0.0, scale, size=(int(dup.sum()), X.shape[1]))
    return X


def conditional_probabilities(D, perplexity, tol=1e-3, max_iter=100):
    """Row-wise calibrated conditionals. Returns (P_cond, calibrations)."""
    n = D.shape[0]
    P = np.zeros((n, n))
    cals = []
    for i in range(n):
        row = np.delete(D[i], i)
        cal = perplexity_calibrate(row, perplexity, tol, max_iter)
        P[i, np.arange(n) != i] = cal.probs
        cals.append(cal)
    return P, cals


def joint_probabilities(conditionals):
    Pc = np.asarray(conditionals, dtype=np.float64)
    n = Pc.shape[0]
    P = (Pc + Pc.T) / (2.0 * n)
    P = np.maximum(P, P_FLOOR)
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    return AffinityMatrix(P)


def _student_t(Y):
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P, Y):
    num = _student_t(Y)
    Q = np.maximum(num / num.sum(), P_FLOOR)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def _gradient(P, Y):
    num = _student_t(Y)
    Q = num / num.sum()
    W = (P - Q) * num
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


def tsne(descriptors, labels=None, config: TSNEConfig | None = None, init=None):
    """Gradient descent on KL(P || Q) with Student-t output affinities.

    Plain momentum updates (no per-coordinate gains) keep the optimisation
    equivariant to rotations of the initial layout.
    """
    config = config or TSNEConfig()
    X = np.asarray(descriptors, dtype=np.float64)
    n = len(X)
    if n < 5:
        raise ConfigurationError(f"t-SNE needs at least 5 points, got {n}")
    if not config.perplexity < n / 3:
        raise ConfigurationError(f"perplexity {config.perplexity} must be < n/3 = {n / 3:.2f}")
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    X = jitter_duplicates(X, seed=config.seed)
    Pc, _ = conditional_probabilities(squared_distances(X), config.perplexity)
    P = joint_probabilities(Pc).P

    Y = rng.normal(0.0, config.init_std, size=(n, 2)) if init is None else np.array(init, dtype=np.float64)
    velocity = np.zeros_like(Y)
    history = []
    for it in range(config.iters):
        exaggerating = it < config.exaggeration_iters
        momentum = config.momentum if it < config.momentum_switch else config.final_momentum
        grad = _gradient(P * config.exaggeration if exaggerating else P, Y)
        velocity = momentum * velocity - config.learning_rate * grad
        Y = Y + velocity
        if not np.all(np.isfinite(Y)):
            raise NumericalError(f"t-SNE produced non-finite coordinates at iteration {it}")
        if (it + 1) % config.kl_every == 0 or it == config.iters - 1:
            history.append((it + 1, kl_divergence(P, Y)))
    return EmbeddingLayout(Y, labels, kl_divergence(P, Y), history)
