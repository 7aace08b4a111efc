"""
Report emission: CSV tables, summary.json, rasterized plots, heatmap
overlays, crop galleries and a run manifest indexing every output.

Everything except ``run_manifest.json`` is a pure function of the bundle, so
identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from datetime import datetime, timezone

import numpy as np
from PIL import Image, ImageDraw

from . import __version__
from .codestats import crop_label, top_pairs
from .errors import LoadError, OutputError

GALLERY_SIZE = 16
CODES_HEADER = ["code", "n_selections", "share", "n_crops", "consistency", "baseline_delta", "purity",
                "dominant_label", "entropy_bits"]
FREQ_HEADER = ["code", "n_selections", "share", "n_observations", "observation_share"]
TSNE_HEADER = ["point", "code", "x", "y", "episode", "step"]
CROPS_HEADER = ["code", "episode", "step", "row_min", "col_min", "row_max", "col_max", "label", "zero_descriptor"]

_ANCHORS = np.array([
    [0, 0, 0], [60, 9, 101], [150, 38, 102], [226, 80, 57], [251, 156, 6], [252, 255, 164],
], dtype=np.float64)


def colormap():
    """Fixed 256-entry dark-to-bright colormap (entry 0 is black)."""
    pos = np.linspace(0, len(_ANCHORS) - 1, 256)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_ANCHORS) - 1)
    frac = (pos - lo)[:, None]
    return np.rint(_ANCHORS[lo] * (1 - frac) + _ANCHORS[hi] * frac).astype(np.uint8)


COLORMAP = colormap()


def overlay(frame, heatmap, alpha=0.5):
    """Blend the colormapped heatmap (values in [0, 1]) over an RGB frame."""
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    frame = np.asarray(frame)
    if values.shape != frame.shape[:2]:
        raise ValueError(f"heatmap {values.shape} does not match frame {frame.shape[:2]}")
    idx = np.clip(np.rint(values * 255), 0, 255).astype(np.int64)
    out = (1.0 - alpha) * frame.astype(np.float64) + alpha * COLORMAP[idx].astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --- formatting ----------------------------------------------------------

def _num(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) if isinstance(v, (int, float, np.integer, np.floating)) else v for v in r])
    return buf.getvalue().encode()


def _png_bytes(img):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


class _Writer:
    def __init__(self, root):
        self.root = root
        self.files = {}

    def put(self, rel, data):
        path = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
        self.files[rel] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}


def ensure_writable(out_dir):
    """Create ``out_dir`` and prove it is writable before any real output."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir):
            pass
    except OSError as exc:
        raise OutputError(f"{out_dir}: output directory is not writable ({exc})") from None


# --- tables --------------------------------------------------------------

def code_rows(bundle):
    usage, cons, pur = bundle.usage, bundle.consistency.codes, bundle.purity.codes
    n_crops = {}
    for c in bundle.crops:
        n_crops[c.code] = n_crops.get(c.code, 0) + 1
    rows = []
    for code in sorted(set(np.flatnonzero(usage.counts).tolist()) | set(n_crops)):
        e, p = cons.get(code), pur.get(code)
        rows.append([
            code, int(usage.counts[code]), float(usage.shares[code]), n_crops.get(code, 0),
            e.score if e else None, (e.score - bundle.baseline) if e else None,
            p.purity if p else None, p.dominant if p else None, p.entropy_bits if p else None,
        ])
    return rows


def summary(bundle):
    cons = bundle.consistency_summary()
    usage = bundle.usage
    pairs = [{"i": i, "j": j, "rate": r, "episodes": bundle.episode_pair_counts.get((i, j), 0)}
             for i, j, r in _top_pairs(bundle)]
    layout = bundle.layout
    return _json_safe({
        "n_observations": bundle.n_observations,
        "codebook_size": bundle.K,
        "total_pairs": bundle.total_pairs,
        "kept_heatmaps": bundle.kept,
        "dropped_heatmaps": bundle.dropped,
        "zero_heatmap_fraction": bundle.zero_fraction,
        "active_codes": int(np.count_nonzero(usage.counts)),
        "total_selections": usage.total,
        "n_crops": len(bundle.crops),
        "baseline": bundle.baseline,
        "baseline_trials": bundle.baseline_trials,
        "consistency": cons,
        "median_gap_below_best_gap": (cons["median_gap"] < cons["best_gap"]) if cons["median"] is not None else None,
        "purity_min": min((p.purity for p in bundle.purity.codes.values()), default=None),
        "consistency_min": min(bundle.consistency.scores().values(), default=None),
        "top_pairs": pairs,
        "selected_for_projection": bundle.selected,
        "tsne": {"n_points": 0 if layout is None else len(layout.coords),
                 "kl": None if layout is None else layout.kl, "note": bundle.layout_note},
        "unselected_probe": {"pairs": bundle.probe_total, "nonzero": bundle.probe_nonzero},
        "dataset_checksum": bundle.dataset_checksum,
        "model_checksum": bundle.model_checksum,
        "config": bundle.config,
    })


def _top_pairs(bundle):
    return top_pairs(bundle.cooccurrence, 10)


def write_tables(bundle, w: _Writer):
    w.put("codes.csv", _csv_bytes(CODES_HEADER, code_rows(bundle)))
    u = bundle.usage
    w.put("frequency.csv", _csv_bytes(FREQ_HEADER, [
        [k, int(u.counts[k]), float(u.shares[k]), int(u.obs_counts[k]), float(u.obs_shares[k])] for k in range(bundle.K)
    ]))
    rates = bundle.cooccurrence.rates
    w.put("cooccurrence.csv", _csv_bytes(["code"] + [str(k) for k in range(bundle.K)],
                                         [[k] + [float(v) for v in rates[k]] for k in range(bundle.K)]))
    rows = []
    if bundle.layout is not None:
        for p, (xy, src) in enumerate(zip(bundle.layout.coords, bundle.layout_sources)):
            c = bundle.crops[src]
            rows.append([p, c.code, float(xy[0]), float(xy[1]), c.episode, c.step])
    w.put("tsne.csv", _csv_bytes(TSNE_HEADER, rows))
    w.put("crops.csv", _csv_bytes(CROPS_HEADER, [
        [c.code, c.episode, c.step, *c.bbox, crop_label(c.mask), int(not np.any(c.descriptor))] for c in bundle.crops
    ]))
    w.put("summary.json", (json.dumps(summary(bundle), indent=1, sort_keys=True) + "\n").encode())


def write_samples(bundle, w: _Writer):
    """Raw material for figures: gallery crops and overlay heatmaps."""
    counts = {}
    for c in bundle.crops:
        k = counts.get(c.code, 0)
        if k < GALLERY_SIZE:
            w.put(f"galleries/code_{c.code:03d}/crop_{k:02d}.png", _png_bytes(c.image))
        counts[c.code] = k + 1
    if bundle.overlays:
        arrays = {}
        for n, (e, t, frame, heatmaps) in enumerate(bundle.overlays):
            arrays[f"s{n}_frame"] = frame
            arrays[f"s{n}_meta"] = np.array([e, t])
            arrays[f"s{n}_codes"] = np.array([h.code for h in heatmaps], dtype=np.int64)
            arrays[f"s{n}_maps"] = np.array([h.values for h in heatmaps]).reshape(len(heatmaps), *frame.shape[:2])
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        w.put("overlays/heatmaps.npz", buf.getvalue())


# --- reading a saved bundle ---------------------------------------------

def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _float(s):
    return float("nan") if s in ("", "nan") else float(s)


def load_bundle(directory):
    """Read the tables and samples written by ``emit_reports``."""
    try:
        with open(os.path.join(directory, "summary.json")) as fh:
            data = {"summary": json.load(fh)}
        _, data["codes"] = _read_csv(os.path.join(directory, "codes.csv"))
        _, data["frequency"] = _read_csv(os.path.join(directory, "frequency.csv"))
        header, rows = _read_csv(os.path.join(directory, "cooccurrence.csv"))
        data["cooccurrence"] = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(header) - 1)
        _, data["tsne"] = _read_csv(os.path.join(directory, "tsne.csv"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"{directory}: incomplete report bundle ({exc})") from None
    galleries = {}
    gdir = os.path.join(directory, "galleries")
    if os.path.isdir(gdir):
        for sub in sorted(os.listdir(gdir)):
            full = os.path.join(gdir, sub)
            if os.path.isdir(full):
                imgs = []
                for name in sorted(os.listdir(full)):
                    with Image.open(os.path.join(full, name)) as im:
                        imgs.append(np.array(im.convert("RGB")))
                galleries[int(sub.split("_")[1])] = imgs
    data["galleries"] = galleries
    samples = []
    npz = os.path.join(directory, "overlays", "heatmaps.npz")
    if os.path.exists(npz):
        with np.load(npz) as z:
            n = len([k for k in z.files if k.endswith("_frame")])
            for i in range(n):
                samples.append((*z[f"s{i}_meta"].tolist(), z[f"s{i}_frame"], z[f"s{i}_codes"], z[f"s{i}_maps"]))
    data["overlays"] = samples
    return data


# --- figures ---------------------------------------------------------------

_PALETTE = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
            (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207)]


def _canvas(w, h):
    img = Image.new("RGB", (w, h), (255, 255, 255))
    return img, ImageDraw.Draw(img)


def bar_plot(values, labels, title, ref=None, size=(640, 320)):
    """Vertical bars with an optional horizontal reference line."""
    W, H = size
    img, draw = _canvas(W, H)
    left, right, top, bottom = 40, 10, 24, 30
    draw.text((left, 4), title, fill=(0, 0, 0))
    vals = np.nan_to_num(np.asarray(values, dtype=np.float64))
    top_val = max(float(vals.max()) if len(vals) else 0.0, ref or 0.0, 1e-12)
    plot_w, plot_h = W - left - right, H - top - bottom
    bw = plot_w / max(len(vals), 1)
    draw.line([(left, top), (left, H - bottom), (W - right, H - bottom)], fill=(0, 0, 0))
    for i, v in enumerate(vals):
        x0 = left + i * bw
        y0 = H - bottom - plot_h * max(v, 0) / top_val
        draw.rectangle([x0 + 1, y0, x0 + max(bw - 1, 1), H - bottom], fill=_PALETTE[0])
        if len(vals) <= 40:
            draw.text((x0 + 1, H - bottom + 4), str(labels[i]), fill=(0, 0, 0))
    if ref is not None and math.isfinite(ref):
        y = H - bottom - plot_h * ref / top_val
        draw.line([(left, y), (W - right, y)], fill=(214, 39, 40), width=2)
    draw.text((2, top), f"{top_val:.3g}", fill=(0, 0, 0))
    return np.array(img)


def scatter_plot(points, labels, title, size=(480, 480)):
    W, H = size
    img, draw = _canvas(W, H)
    draw.text((8, 4), title, fill=(0, 0, 0))
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    order = {c: k for k, c in enumerate(sorted(set(labels)))}
    for (x, y), lab in zip(pts, labels):
        px = 20 + (W - 40) * (x - lo[0]) / span[0]
        py = 30 + (H - 50) * (1 - (y - lo[1]) / span[1])
        draw.ellipse([px - 2, py - 2, px + 2, py + 2], fill=_PALETTE[order[lab] % len(_PALETTE)])
    for k, c in enumerate(sorted(order)):
        draw.text((W - 70, 20 + 12 * k), f"code {c}", fill=_PALETTE[k % len(_PALETTE)])
    return np.array(img)


def matrix_plot(mat, cell=None):
    mat = np.asarray(mat, dtype=np.float64)
    n = mat.shape[0]
    cell = cell or max(2, 512 // max(n, 1))
    top = mat.max() if mat.size and mat.max() > 0 else 1.0
    rgb = COLORMAP[np.clip(np.rint(mat / top * 255), 0, 255).astype(np.int64)]
    return np.kron(rgb, np.ones((cell, cell, 1), dtype=np.uint8))


def montage(images, cols=8, pad=2, tile=None):
    """Grid of images, each scaled to ``tile`` px (nearest) on a white background."""
    if not images:
        return None
    tile = tile or max(max(im.shape[0], im.shape[1]) for im in images)
    rows = math.ceil(len(images) / cols)
    cols = min(cols, len(images))
    out = np.full((rows * (tile + pad) + pad, cols * (tile + pad) + pad, 3), 255, dtype=np.uint8)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        pil = Image.fromarray(im).resize((im.shape[1] * tile // max(im.shape[:2]),
                                          im.shape[0] * tile // max(im.shape[:2])), Image.NEAREST)
        arr = np.array(pil)
        y, x = pad + r * (tile + pad), pad + c * (tile + pad)
        out[y:y + arr.shape[0], x:x + arr.shape[1]] = arr
    return out


def render_figures(data, w: _Writer):
    """Plots, overlays and gallery montages from loaded bundle data."""
    s = data["summary"]
    scored = [(int(r[0]), _float(r[4])) for r in data["codes"] if r[4] not in ("", "nan")]
    if scored:
        scored.sort(key=lambda t: (-t[1], t[0]))
        w.put("plots/consistency.png", _png_bytes(bar_plot(
            [v for _, v in scored], [c for c, _ in scored], "mean cosine similarity per code (red: random crops)",
            ref=s.get("baseline"))))
    freq = [(int(r[0]), int(r[1])) for r in data["frequency"] if int(r[1]) > 0]
    if freq:
        freq.sort(key=lambda t: (-t[1], t[0]))
        w.put("plots/frequency.png", _png_bytes(bar_plot(
            [v for _, v in freq], [c for c, _ in freq], "code selections (sorted)")))
    if data["cooccurrence"].size and np.any(data["cooccurrence"]):
        w.put("plots/cooccurrence.png", _png_bytes(matrix_plot(data["cooccurrence"])))
    if data["tsne"]:
        pts = [(float(r[2]), float(r[3])) for r in data["tsne"]]
        w.put("plots/tsne.png", _png_bytes(scatter_plot(pts, [int(r[1]) for r in data["tsne"]], "t-SNE of crop descriptors")))
    for e, t, frame, codes, maps in data["overlays"]:
        for code, m in zip(codes, maps):
            w.put(f"overlays/ep{e}_t{t}_code{int(code):03d}.png", _png_bytes(overlay(frame, m)))
    for code, imgs in sorted(data["galleries"].items()):
        w.put(f"galleries/code_{code:03d}.png", _png_bytes(montage(imgs, tile=32)))


def _index_existing(directory, w: _Writer, skip=("run_manifest.json",)):
    for root, _, names in os.walk(directory):
        for name in sorted(names):
            full = os.path.join(root, name)
            rel = os.path.relpath(full, directory).replace(os.sep, "/")
            if rel in skip or rel in w.files:
                continue
            with open(full, "rb") as fh:
                data = fh.read()
            w.files[rel] = {"bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()}


def write_manifest(out_dir, w: _Writer, command, config, seed, dataset_checksum, model_checksum, started, finished):
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": _json_safe(config),
        "seed": seed,
        "dataset_checksum": dataset_checksum,
        "model_checksum": model_checksum,
        "started": started,
        "finished": finished,
        "outputs": dict(sorted(w.files.items())),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def emit_reports(bundle, out_dir, command="audit", started=None, extra_files=None):
    """Write every table, sample and figure for ``bundle``. Returns the manifest."""
    started = started or _now()
    ensure_writable(out_dir)
    w = _Writer(out_dir)
    for rel, data in sorted((extra_files or {}).items()):
        w.put(rel, data)
    write_tables(bundle, w)
    write_samples(bundle, w)
    render_figures(load_bundle(out_dir), w)
    return write_manifest(out_dir, w, command, bundle.config, bundle.config.get("seed"),
                          bundle.dataset_checksum, bundle.model_checksum, started, _now())


def render_bundle(bundle_dir, out_dir=None, command="report"):
    """Re-render figures from a saved bundle directory."""
    started = _now()
    out_dir = out_dir or bundle_dir
    data = load_bundle(bundle_dir)
    ensure_writable(out_dir)
    w = _Writer(out_dir)
    render_figures(data, w)
    if os.path.abspath(out_dir) == os.path.abspath(bundle_dir):
        _index_existing(out_dir, w)
    s = data["summary"]
    return write_manifest(out_dir, w, command, s.get("config", {}), s.get("config", {}).get("seed"),
                          s.get("dataset_checksum"), s.get("model_checksum"), started, _now())
