"""Slow, obviously-correct reference implementations used as test oracles."""
from collections import deque

import numpy as np


def conv2d_naive(x, w, b, stride, pad):
    """Direct loop convolution (cross-correlation), x: (N,C,H,W), w: (O,C,k,k)."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[i, f, r, s] = np.sum(patch * w[f]) + b[f]
    return out


def conv2d_transpose_naive(x, w, b, stride, pad):
    """Scatter each input pixel times its kernel, then crop the padding. w: (C,O,k,k)."""
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    full = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for i in range(n):
        for ch in range(c):
            for r in range(h):
                for s in range(wd):
                    full[i, :, r * stride:r * stride + k, s * stride:s * stride + k] += x[i, ch, r, s] * w[ch]
    out = full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]
    return out + b[None, :, None, None]


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f with respect to every entry of x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def flood_fill_components(mask, connectivity=8):
    """Breadth-first labelling. Returns sorted list of frozensets of (r, c)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    seen = np.zeros_like(mask)
    comps = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            seen[r, c] = True
            queue, pixels = deque([(r, c)]), set()
            while queue:
                y, x = queue.popleft()
                pixels.add((y, x))
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(frozenset(pixels))
    return comps


def nearest_exhaustive(vectors, codes):
    out = []
    for v in vectors:
        best, best_d = 0, None
        for i, c in enumerate(codes):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, c))
            if best_d is None or d < best_d:
                best, best_d = i, d
        out.append(best)
    return out


def count_frequency(grids, K):
    counts = [0] * K
    obs = [0] * K
    for g in grids:
        seen = set()
        for v in np.asarray(g).ravel().tolist():
            counts[v] += 1
            seen.add(v)
        for v in seen:
            obs[v] += 1
    return counts, obs


def count_cooccurrence(code_sets, K):
    sets = [set(s) for s in code_sets]
    rates = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            ni = sum(1 for s in sets if i in s)
            nj = sum(1 for s in sets if j in s)
            nij = sum(1 for s in sets if i in s and j in s)
            rates[i, j] = nij / ((ni + nj) / 2) if ni + nj else 0.0
    return rates
