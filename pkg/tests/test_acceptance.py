"""Acceptance criteria, each timed and recorded for the terminal summary.

Run alone with ``pytest tests/test_acceptance.py``; the per-criterion
pass/fail lines are printed at the end of the session.
"""
import json
import time

import numpy as np
import pytest

from gradchecks import run_all
from oracles import count_cooccurrence, count_frequency, flood_fill_components, nearest_exhaustive
from test_codestats import hand_cooccurrence_rate
from test_projection import planted_clusters, separation
from vqaudit import codestats as cs
from vqaudit import projection as pj
from vqaudit.cli import main
from vqaudit.regions import connected_components
from vqaudit.vqcodec import load_checkpoint, quantize

RESULTS = {}
TABLES = ["codes.csv", "cooccurrence.csv", "tsne.csv", "summary.json"]


def record(number, name, ok, seconds, detail=""):
    RESULTS[number] = (name, bool(ok), seconds, detail)
    print(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}")


def accounting(report_dir):
    s = json.loads((report_dir / "summary.json").read_text())
    ok = s["kept_heatmaps"] + s["dropped_heatmaps"] == s["total_pairs"] and s.get("zero_heatmap_fraction") is not None
    return ok, s


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Default dataset and default training run, timed."""
    root = tmp_path_factory.mktemp("trained")
    assert main(["gen", "--out", str(root / "ds")]) == 0
    t0 = time.perf_counter()
    code = main(["train", "--dataset", str(root / "ds"), "--out", str(root / "model.ckpt"), "--log-every", "1000"])
    return root, code, time.perf_counter() - t0


AUDIT_RUNS = []


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = run_all(instances=20)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and secs < 30
    record(1, "gradient suite", ok, secs, f"worst relative error {max(worst.values()):.2e} over {len(worst)} checks")
    assert max(worst.values()) <= 1e-4, worst
    assert secs < 30


def test_criterion_2_oracle_audit(tmp_path):
    out = tmp_path / "oracle"
    t0 = time.perf_counter()
    code = main(["oracle-check", "--episodes", "50", "--out", str(out)])
    secs = time.perf_counter() - t0
    result = json.loads((out / "oracle_check.json").read_text())
    AUDIT_RUNS.append(out)
    ok = code == 0 and result["passed"] and secs < 300
    record(2, "oracle-model audit", ok, secs,
           f"{result['codes']} codes, {result['unselected_pairs']} unselected pairs probed, problems: {result['problems']}")
    assert result["passed"], result["problems"]
    assert secs < 300


def test_criterion_3_brute_force_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n = 0
    for _ in range(100):
        K, d = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        codes = rng.normal(size=(K, d))
        z = rng.normal(size=(d, 4, 4))
        got = quantize(z, codes).assignments.ravel().tolist()
        assert got == nearest_exhaustive(np.moveaxis(z, 0, -1).reshape(-1, d), codes)
        mask = rng.uniform(size=tuple(rng.integers(1, 20, size=2))) < 0.45
        conn = int(rng.choice([4, 8]))
        comps = [frozenset(map(tuple, c.pixels.tolist())) for c in connected_components(mask, conn)]
        assert sorted(comps, key=sorted) == sorted(flood_fill_components(mask, conn), key=sorted)
        sets = [set(rng.choice(K, size=int(rng.integers(0, K + 1)), replace=False).tolist()) for _ in range(8)]
        assert np.array_equal(cs.cooccurrence(sets, K).rates, count_cooccurrence(sets, K))
        grids = [rng.integers(0, K, size=(3, 3)) for _ in range(5)]
        usage = cs.code_frequency(grids, K)
        assert (usage.counts.tolist(), usage.obs_counts.tolist()) == count_frequency(grids, K)
        n += 1
    secs = time.perf_counter() - t0
    record(3, "brute-force equivalence", secs < 60, secs, f"{n} instances each of 4 comparisons, all exact")
    assert secs < 60


def test_criterion_4_training_sanity(trained):
    root, code, secs = trained
    meta = load_checkpoint(root / "model.ckpt").meta
    drop = 1 - meta["mse_final"] / meta["mse_initial"]
    ok = code == 0 and drop >= 0.9 and secs < 900 and meta["train"]["steps"] == 5000 and meta["train"]["subset_size"] == 1000
    record(4, "training sanity", ok, secs,
           f"MSE {meta['mse_initial']:.5f} -> {meta['mse_final']:.5f} ({100 * drop:.1f}% lower)")
    assert drop >= 0.9
    assert secs < 900


def test_criterion_5_comparison_is_reported(trained):
    root, _, _ = trained
    out = root / "report"
    t0 = time.perf_counter()
    code = main(["audit", "--dataset", str(root / "ds"), "--checkpoint", str(root / "model.ckpt"), "--out", str(out)])
    secs = time.perf_counter() - t0
    AUDIT_RUNS.append(out)
    s = json.loads((out / "summary.json").read_text())
    c = s["consistency"]
    values = [s["baseline"], c["median"], c["best"], c["median_gap"], c["best_gap"]]
    finite = all(v is not None and np.isfinite(v) for v in values)
    record(5, "baseline comparison emitted", code == 0 and finite, secs,
           f"baseline {s['baseline']:.4f}, median {c['median']:.4f}, best {c['best']:.4f}, "
           f"median gap below best gap: {s['median_gap_below_best_gap']}" if finite else "missing values")
    assert finite


def test_criterion_6_closed_forms():
    t0 = time.perf_counter()
    score = cs.consistency(np.eye(2))[0]
    rate = float(hand_cooccurrence_rate())
    p = cs.purity({0: [0, 1] * 25}).codes[0]
    ok = abs(score - 1 / np.sqrt(2)) <= 1e-9 and rate == 2 / 3 and p.purity == 0.5 and p.entropy_bits == 1.0
    record(6, "metric closed forms", ok, time.perf_counter() - t0,
           f"consistency {score!r}, co-occurrence {rate!r}, purity {p.purity}, entropy {p.entropy_bits} bit")
    assert ok


def test_criterion_7_tsne():
    X, labels = planted_clusters(500)
    t0 = time.perf_counter()
    Xj = pj.jitter_duplicates(X)
    Pc, cals = pj.conditional_probabilities(pj.squared_distances(Xj), 30.0)
    P = pj.joint_probabilities(Pc).P
    layout = pj.tsne(X, labels)
    secs = time.perf_counter() - t0
    worst = max(abs(c.perplexity - 30.0) for c in cals)
    sym = float(np.max(np.abs(P - P.T)))
    between, spread = separation(layout.coords, labels)
    ok = worst <= 0.03 and sym <= 1e-9 and abs(P.sum() - 1) <= 1e-9 and between > 3 * spread and secs < 120
    record(7, "t-SNE", ok, secs, f"n=1000, worst |2^H - 30| {worst:.2e}, asymmetry {sym:.1e}, "
                                 f"centroid gap / spread {between / spread:.1f}")
    assert ok


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen", "--out", str(d / "ds"), "--episodes", "8", "--steps", "20", "--seed", "3"]) == 0
        assert main(["train", "--dataset", str(d / "ds"), "--out", str(d / "model.ckpt"), "--steps", "150",
                     "--subset", "120", "--seed", "3", "--log-every", "1000"]) == 0
        assert main(["audit", "--dataset", str(d / "ds"), "--checkpoint", str(d / "model.ckpt"), "--out",
                     str(d / "report"), "--seed", "3", "--tsne-min-count", "10", "--perplexity", "10"]) == 0
        AUDIT_RUNS.append(d / "report")
    secs = time.perf_counter() - t0
    same = {name: (tmp_path / "a" / "report" / name).read_bytes() == (tmp_path / "b" / "report" / name).read_bytes()
            for name in TABLES}
    points = json.loads((tmp_path / "a" / "report" / "summary.json").read_text())["tsne"]["n_points"]
    record(8, "determinism", all(same.values()), secs, f"identical: {same}, t-SNE points {points}")
    assert all(same.values()), same


def test_criterion_9_accounting():
    t0 = time.perf_counter()
    checks = [accounting(d) for d in AUDIT_RUNS]
    ok = bool(checks) and all(c[0] for c in checks)
    fracs = ", ".join(f"{s['zero_heatmap_fraction']:.3f}" for _, s in checks)
    record(9, "heatmap accounting", ok, time.perf_counter() - t0,
           f"{len(checks)} audit runs, zero-heatmap fractions {fracs}")
    assert ok
