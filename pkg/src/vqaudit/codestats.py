"""
Audit statistics over codes: consistency of crop descriptors, a random-crop
baseline, usage frequency, co-occurrence, projection selection and
ground-truth purity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass
class CodeConsistency:
    code: int
    count: int
    mean: np.ndarray
    score: float
    low_support: bool = False
    crops: list = field(default_factory=list)


@dataclass
class ConsistencyReport:
    codes: dict  # code -> CodeConsistency
    baseline: float = float("nan")

    def scores(self):
        return {c: e.score for c, e in self.codes.items()}


@dataclass
class CodeUsage:
    counts: np.ndarray  # selection events per code (latent positions)
    shares: np.ndarray
    obs_counts: np.ndarray  # observations in which the code appears
    obs_shares: np.ndarray
    total: int = 0
    observations: int = 0

    @property
    def active(self):
        return np.flatnonzero(self.counts)


@dataclass
class CooccurrenceMatrix:
    rates: np.ndarray  # K x K
    counts: np.ndarray  # n_i per code
    joint: np.ndarray  # n_ij


@dataclass
class CodePurity:
    code: int
    dominant: int
    purity: float
    entropy_bits: float
    histogram: dict


@dataclass
class PurityReport:
    codes: dict  # code -> CodePurity


def consistency(descriptors):
    """Mean cosine similarity between the mean descriptor and each descriptor.

    All-zero descriptors are excluded. Returns (score, count, mean vector).
    """
    vecs = np.asarray(descriptors, dtype=np.float64)
    if vecs.ndim != 2:
        raise ConfigurationError(f"expected an (n, dims) descriptor array, got shape {vecs.shape}")
    norms = np.linalg.norm(vecs, axis=1)
    vecs, norms = vecs[norms > 0], norms[norms > 0]
    if len(vecs) == 0:
        raise ConfigurationError("consistency needs at least one nonzero descriptor")
    mean = vecs.mean(axis=0)
    mnorm = np.linalg.norm(mean)
    if mnorm == 0:
        return 0.0, len(vecs), mean
    cos = (vecs @ mean) / (norms * mnorm)
    return float(np.mean(cos)), len(vecs), mean


def consistency_report(descriptors_by_code, crops_by_code=None):
    out = {}
    for code in sorted(descriptors_by_code):
        vecs = descriptors_by_code[code]
        if len(vecs) == 0:
            continue
        score, count, mean = consistency(vecs)
        out[code] = CodeConsistency(code, count, mean, score, count == 1,
                                    list((crops_by_code or {}).get(code, [])))
    return ConsistencyReport(out)


def random_baseline(sample_descriptor, n_observations, crop_sizes, samples_per_trial, trials=10, seed=0,
                    frame_size=(64, 64)):
    """Consistency of randomly placed crops, averaged over trials.

    ``sample_descriptor(obs_index, bbox)`` returns a descriptor vector for the
    crop ``bbox`` (inclusive row/col bounds) of observation ``obs_index``.
    Crop sizes are drawn from ``crop_sizes`` (the audited (h, w) pairs).
    Returns (mean score, per-trial scores).
    """
    if n_observations < 1:
        raise ConfigurationError("random baseline needs a nonempty dataset")
    if not crop_sizes:
        raise ConfigurationError("random baseline needs at least one crop size")
    if samples_per_trial < 1 or trials < 1:
        raise ConfigurationError("samples per trial and trials must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    H, W = frame_size
    sizes = list(crop_sizes)
    per_trial = []
    for _ in range(trials):
        vecs = []
        for _ in range(samples_per_trial):
            obs = int(rng.integers(n_observations))
            h, w = sizes[int(rng.integers(len(sizes)))]
            h, w = min(h, H), min(w, W)
            r0 = int(rng.integers(H - h + 1))
            c0 = int(rng.integers(W - w + 1))
            vecs.append(sample_descriptor(obs, (r0, c0, r0 + h - 1, c0 + w - 1)))
        vecs = np.asarray(vecs)
        if np.any(np.linalg.norm(vecs, axis=1) > 0):
            per_trial.append(consistency(vecs)[0])
    if not per_trial:
        raise ConfigurationError("every random crop produced a zero descriptor")
    return float(np.mean(per_trial)), per_trial


def code_frequency(assignment_grids, K):
    """Latent-position selection counts and per-observation presence counts."""
    counts = np.zeros(K, dtype=np.int64)
    obs_counts = np.zeros(K, dtype=np.int64)
    n_obs = 0
    for grid in assignment_grids:
        grid = np.asarray(grid).ravel()
        counts += np.bincount(grid, minlength=K)[:K]
        obs_counts[np.unique(grid)] += 1
        n_obs += 1
    total = int(counts.sum())
    shares = counts / total if total else np.zeros(K)
    obs_shares = obs_counts / n_obs if n_obs else np.zeros(K)
    return CodeUsage(counts, shares, obs_counts, obs_shares, total, n_obs)


def presence_matrix(code_sets, K):
    """Boolean (n_obs, K) matrix from per-observation code sets."""
    code_sets = list(code_sets)
    out = np.zeros((len(code_sets), K), dtype=bool)
    for i, s in enumerate(code_sets):
        idx = np.fromiter((int(c) for c in s), dtype=np.int64)
        out[i, idx] = True
    return out


def cooccurrence(code_sets, K):
    """rate(i, j) = n_ij / ((n_i + n_j) / 2) off the diagonal; diagonal zero."""
    presence = presence_matrix(code_sets, K).astype(np.int64)
    joint = presence.T @ presence
    n = np.diag(joint).copy()
    denom = (n[:, None] + n[None, :]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(denom > 0, joint / np.where(denom > 0, denom, 1.0), 0.0)
    np.fill_diagonal(rates, 0.0)
    return CooccurrenceMatrix(rates, n, joint)


def top_pairs(matrix, k=10):
    """Highest off-diagonal rates as (i, j, rate) with i < j; ties by (i, j)."""
    rates = matrix.rates if isinstance(matrix, CooccurrenceMatrix) else np.asarray(matrix)
    n = rates.shape[0]
    if n < 2 or k <= 0:
        return []
    iu, ju = np.triu_indices(n, 1)
    vals = rates[iu, ju]
    order = np.lexsort((ju, iu, -vals))[:k]
    return [(int(iu[o]), int(ju[o]), float(vals[o])) for o in order]


def select_for_projection(report: ConsistencyReport, top_k=10, min_count=500):
    """Most consistent codes among those with at least ``min_count`` embeddings."""
    eligible = [e for e in report.codes.values() if e.count >= min_count]
    eligible.sort(key=lambda e: (-e.score, e.code))
    return [e.code for e in eligible[:top_k]]


def crop_label(crop_mask):
    """Modal ground-truth id of a crop mask (ties go to the smallest id)."""
    counts = np.bincount(np.asarray(crop_mask).ravel())
    return int(np.argmax(counts))


def entropy_bits(counts):
    counts = np.asarray([c for c in counts if c > 0], dtype=np.float64)
    if counts.size == 0:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def purity(labels_by_code):
    """Per-code purity from crop labels: ``{code: [label, ...]}``."""
    out = {}
    for code in sorted(labels_by_code):
        labels = list(labels_by_code[code])
        if not labels:
            continue
        hist = {}
        for lab in labels:
            hist[int(lab)] = hist.get(int(lab), 0) + 1
        dominant = min(hist, key=lambda lab: (-hist[lab], lab))
        out[code] = CodePurity(code, dominant, hist[dominant] / len(labels),
                               entropy_bits(list(hist.values())), dict(sorted(hist.items())))
    return PurityReport(out)


def median(values):
    values = sorted(values)
    if not values:
        return math.nan
    mid = len(values) // 2
    return float(values[mid]) if len(values) % 2 else float((values[mid - 1] + values[mid]) / 2)
