"""
End-to-end code audit over a tile-world dataset.

Per observation: encode, quantize, Grad-CAM for every selected code, drop
all-zero maps, threshold, split into components, crop and embed. The
aggregate pass then scores consistency against a random-crop baseline,
counts usage and co-occurrence, measures label purity and projects the most
consistent codes with t-SNE.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codestats as cs
from . import projection as pj
from . import regions as rg
from .embedder import DescriptorCache
from .errors import ConfigurationError
from .saliency import SaliencyConfig, filter_zero, finalize, gradcam_maps
from .tileworld import read_dataset
from .vqcodec import encode, load_checkpoint, quantize


@dataclass
class AuditConfig:
    seed: int = 0
    act_threshold: float = 0.5
    area_threshold: int = 9
    connectivity: int = 8
    embedder: str = "descriptor"
    baseline_trials: int = 10
    tsne_top_k: int = 10
    tsne_min_count: int = 50
    tsne_max_per_code: int = 100
    perplexity: float = 30.0
    tsne_iters: int = 1000
    workers: int = 1
    layer: int | None = None
    target: str = "distance"
    upsample: str = "bilinear"
    eps: float = 1e-8
    probe_unselected: bool = False  # also run Grad-CAM for codes absent from the observation
    overlay_samples: int = 4
    max_observations: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.act_threshold <= 1.0:
            raise ConfigurationError(f"activation threshold must be in [0, 1], got {self.act_threshold}")
        if self.area_threshold < 1:
            raise ConfigurationError(f"area threshold must be >= 1, got {self.area_threshold}")
        if self.embedder not in ("descriptor", "encoder"):
            raise ConfigurationError(f"unknown embedder {self.embedder!r}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.baseline_trials < 1:
            raise ConfigurationError("baseline trials must be >= 1")

    def saliency(self):
        return SaliencyConfig(self.layer, self.eps, self.upsample, self.target)

    def to_json(self):
        return asdict(self)


@dataclass
class ObservationResult:
    index: int
    episode: int
    step: int
    assignments: np.ndarray
    total: int  # selected (observation, code) pairs
    kept: int
    dropped: int
    probe_total: int = 0
    probe_nonzero: int = 0
    crops: list = field(default_factory=list)  # CropRecord, descriptor filled later
    heatmaps: list | None = None


@dataclass
class ReportBundle:
    config: dict
    K: int
    n_observations: int
    consistency: cs.ConsistencyReport
    baseline: float
    baseline_trials: list
    usage: cs.CodeUsage
    cooccurrence: cs.CooccurrenceMatrix
    episode_pair_counts: dict  # (i, j) -> episodes where both codes appear
    purity: cs.PurityReport
    selected: list
    layout: pj.EmbeddingLayout | None
    layout_note: str
    layout_sources: list  # crop index behind each projected point
    total_pairs: int
    kept: int
    dropped: int
    crops: list  # CropRecord sorted by (code, episode, step, bbox)
    probe_total: int = 0
    probe_nonzero: int = 0
    overlays: list = field(default_factory=list)  # (episode, step, frame, [Heatmap])
    dataset_checksum: str | None = None
    model_checksum: str | None = None

    @property
    def zero_fraction(self):
        return self.dropped / self.total_pairs if self.total_pairs else 0.0

    def consistency_summary(self):
        """Median and best per-code consistency and their gaps to the baseline."""
        scores = list(self.consistency.scores().values())
        if not scores:
            return {"median": None, "best": None, "median_gap": None, "best_gap": None}
        med, best = cs.median(scores), max(scores)
        return {"median": med, "best": best, "median_gap": med - self.baseline, "best_gap": best - self.baseline}


def observations_of(episodes, limit=None):
    """(episode, step, Observation) for the source frame of every transition."""
    out = []
    for ep in sorted(episodes, key=lambda e: e.episode):
        for t in range(len(ep.actions)):
            out.append((ep.episode, t, ep.observations[t]))
    return out[:limit] if limit is not None else out


def audit_observation(model, index, episode, step, obs, config: AuditConfig, keep_heatmaps=False):
    """Grad-CAM, zero filter and region extraction for one observation."""
    sal = config.saliency()
    forward = encode(model, obs.frame, keep=True)
    assignments = quantize(forward[0], model.codes).assignments
    selected = np.unique(assignments).tolist()
    probes = sorted(set(range(model.K)) - set(selected)) if config.probe_unselected else []
    code_ids = selected + probes
    maps, _, _ = gradcam_maps(model, obs.frame, code_ids, sal, forward=forward)
    heatmaps = [finalize(m, obs.mask.shape, sal, c, episode, step) for m, c in zip(maps, code_ids)]
    chosen, probed = heatmaps[:len(selected)], heatmaps[len(selected):]
    kept, dropped, _ = filter_zero(chosen, config.eps)
    crops = []
    for hm in kept:
        for comp in rg.extract_regions(hm, config.act_threshold, config.area_threshold, config.connectivity):
            crops.append(rg.crop(obs, comp, hm.code, episode, step))
    return ObservationResult(
        index, episode, step, assignments, len(chosen), len(kept), dropped,
        len(probed), sum(1 for h in probed if not h.is_zero), crops, kept if keep_heatmaps else None,
    )


def _audit_chunk(args):
    model, items, config, overlay_limit = args
    return [audit_observation(model, i, e, t, obs, config, keep_heatmaps=i < overlay_limit)
            for i, e, t, obs in items]


def _run_observations(model, obs_list, config: AuditConfig):
    items = [(i, e, t, obs) for i, (e, t, obs) in enumerate(obs_list)]
    if config.workers == 1 or len(items) < 2:
        return _audit_chunk((model, items, config, config.overlay_samples))
    n_chunks = min(len(items), config.workers * 4)
    chunks = [items[k::n_chunks] for k in range(n_chunks)]
    results = []
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        for part in pool.map(_audit_chunk, [(model, c, config, config.overlay_samples) for c in chunks]):
            results.extend(part)
    return sorted(results, key=lambda r: r.index)


def _check_sizes(model, obs_list):
    if not obs_list:
        raise ConfigurationError("dataset has no observations to audit")
    h, w = obs_list[0][2].frame.shape[:2]
    if (h, w) != tuple(model.image_size):
        raise ConfigurationError(f"dataset frames are {h}x{w} but the model expects {model.image_size[0]}x{model.image_size[1]}")


def _episode_pair_counts(results, pairs):
    by_episode = {}
    for r in results:
        by_episode.setdefault(r.episode, set()).update(np.unique(r.assignments).tolist())
    out = {}
    for i, j, _ in pairs:
        out[(i, j)] = 0
    for codes in by_episode.values():
        for i, j, _ in pairs:
            if i in codes and j in codes:
                out[(i, j)] += 1
    return out


def _project(consistency, crops, vectors, config: AuditConfig):
    selected = cs.select_for_projection(consistency, config.tsne_top_k, config.tsne_min_count)
    if not selected:
        return selected, None, [], f"no code has at least {config.tsne_min_count} crops"
    rows, labels = [], []
    for code in selected:
        idx = [i for i, c in enumerate(crops) if c.code == code and np.any(vectors[i])]
        idx = idx[:config.tsne_max_per_code]
        rows.extend(idx)
        labels.extend([code] * len(idx))
    n = len(rows)
    if n < 5 or not config.perplexity < n / 3:
        return selected, None, rows, f"{n} points is too few for perplexity {config.perplexity}"
    tcfg = pj.TSNEConfig(perplexity=config.perplexity, iters=config.tsne_iters, seed=config.seed)
    return selected, pj.tsne(vectors[rows], np.array(labels), tcfg), rows, ""


def run_audit(episodes, model, config: AuditConfig | None = None, dataset_checksum=None, model_checksum=None):
    """Audit ``model`` over ``episodes`` (EpisodeLog list or dataset directory)."""
    config = config or AuditConfig()
    if isinstance(episodes, (str, os.PathLike)):
        episodes = read_dataset(episodes)
    if isinstance(model, (str, os.PathLike)):
        model = load_checkpoint(model)
    obs_list = observations_of(episodes, config.max_observations)
    _check_sizes(model, obs_list)
    results = _run_observations(model, obs_list, config)

    cache = DescriptorCache(config.embedder, model)
    crops = sorted((c for r in results for c in r.crops), key=lambda c: (c.code, c.episode, c.step, c.bbox))
    index = [cache.lookup(c.image) for c in crops]
    vectors = cache.matrix()[index] if crops else np.zeros((0, 1))
    for c, v in zip(crops, vectors):
        c.descriptor = v

    by_code, crops_by_code, labels_by_code = {}, {}, {}
    for i, c in enumerate(crops):
        crops_by_code.setdefault(c.code, []).append(i)
        labels_by_code.setdefault(c.code, []).append(cs.crop_label(c.mask))
        if np.any(vectors[i]):
            by_code.setdefault(c.code, []).append(vectors[i])
    consistency = cs.consistency_report({k: np.array(v) for k, v in by_code.items()}, crops_by_code)

    baseline, trials = float("nan"), []
    if consistency.codes:
        sizes = [c.size for c in crops]
        samples = max(2, int(round(cs.median([e.count for e in consistency.codes.values()]))))
        frames = [obs.frame for _, _, obs in obs_list]

        def sample(obs_index, bbox):
            r0, c0, r1, c1 = bbox
            return cache.vectors[cache.lookup(frames[obs_index][r0:r1 + 1, c0:c1 + 1])]

        baseline, trials = cs.random_baseline(sample, len(frames), sizes, samples, config.baseline_trials,
                                              config.seed, tuple(model.image_size))
    consistency.baseline = baseline

    grids = [r.assignments for r in results]
    usage = cs.code_frequency(grids, model.K)
    cooc = cs.cooccurrence([np.unique(g).tolist() for g in grids], model.K)
    pair_counts = _episode_pair_counts(results, cs.top_pairs(cooc, 10))
    purity = cs.purity(labels_by_code)
    selected, layout, sources, note = _project(consistency, crops, vectors, config)

    overlays = [(r.episode, r.step, obs_list[r.index][2].frame, r.heatmaps) for r in results if r.heatmaps is not None]
    return ReportBundle(
        config=config.to_json(), K=model.K, n_observations=len(results), consistency=consistency,
        baseline=baseline, baseline_trials=trials, usage=usage, cooccurrence=cooc,
        episode_pair_counts=pair_counts, purity=purity, selected=selected, layout=layout, layout_note=note,
        layout_sources=sources,
        total_pairs=sum(r.total for r in results), kept=sum(r.kept for r in results),
        dropped=sum(r.dropped for r in results), crops=crops,
        probe_total=sum(r.probe_total for r in results), probe_nonzero=sum(r.probe_nonzero for r in results),
        overlays=overlays, dataset_checksum=dataset_checksum, model_checksum=model_checksum,
    )
