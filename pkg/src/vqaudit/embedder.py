"""
Crop descriptors used to compare what a code attends to.

Default backend: a fixed 152-d descriptor (24 colour-histogram dims followed
by 128 gradient-orientation dims over a 4x4 cell grid) computed on the crop
resized to 32x32. The alternative backend pools the codec's own encoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk

SIZE = 32
COLOR_BINS = 8
ORIENT_BINS = 8
CELLS = 4
COLOR_DIMS = 3 * COLOR_BINS
GRAD_DIMS = CELLS * CELLS * ORIENT_BINS
DIMS = COLOR_DIMS + GRAD_DIMS
_LUMA = np.array([0.299, 0.587, 0.114])
_FLAT_TOL = 1e-9


@dataclass
class Descriptor:
    vector: np.ndarray
    flat: bool = False  # no gradient energy: orientation block is all zeros

    @property
    def is_zero(self):
        return not np.any(self.vector)


def _resize_batch(images, size=SIZE):
    """(n, h, w, 3) -> (n, 3, size, size) float in [0, 255]."""
    x = np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2)
    return tk.resize(x, size, size)


def color_histograms(resized):
    """(n, 3, s, s) -> (n, 24); each channel's bins sum to 1."""
    n = resized.shape[0]
    bins = np.clip((resized // (256 // COLOR_BINS)).astype(np.int64), 0, COLOR_BINS - 1)
    flat = bins.reshape(n, 3, -1) + COLOR_BINS * np.arange(3)[None, :, None]
    flat = flat + COLOR_DIMS * np.arange(n)[:, None, None]
    counts = np.bincount(flat.ravel(), minlength=n * COLOR_DIMS).reshape(n, COLOR_DIMS)
    return counts / (resized.shape[2] * resized.shape[3])


def luminance_gradients(lum):
    """Central differences with replicated edges; gy points down the rows."""
    p = np.pad(lum, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) / 2.0
    gy = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) / 2.0
    return gx, gy


def orientation_bin(gx, gy):
    """8 signed-orientation bins centred on multiples of 45 degrees (bin 0 = +x)."""
    theta = np.arctan2(gy, gx)
    return np.floor((theta + np.pi / ORIENT_BINS) / (2 * np.pi / ORIENT_BINS)).astype(np.int64) % ORIENT_BINS


def orientation_histograms(resized):
    """(n, 3, s, s) -> (n, 128) magnitude-weighted orientation votes per cell."""
    n, _, s, _ = resized.shape
    lum = np.einsum("c,nchw->nhw", _LUMA, resized)
    gx, gy = luminance_gradients(lum)
    mag = np.hypot(gx, gy)
    ob = orientation_bin(gx, gy)
    cell = s // CELLS
    rows = np.arange(s) // cell
    cell_idx = rows[:, None] * CELLS + rows[None, :]
    idx = (cell_idx[None] * ORIENT_BINS + ob) + GRAD_DIMS * np.arange(n)[:, None, None]
    return np.bincount(idx.ravel(), weights=mag.ravel(), minlength=n * GRAD_DIMS).reshape(n, GRAD_DIMS)


def describe_batch(images):
    """Descriptors for same-shape crops. Returns (vectors (n, 152), flat flags (n,))."""
    resized = _resize_batch(images)
    color = color_histograms(resized)
    grad = orientation_histograms(resized)
    mass = grad.sum(axis=1, keepdims=True)
    flat = mass[:, 0] <= _FLAT_TOL
    # the orientation block carries the same total mass (3) as the colour block
    grad = np.where(flat[:, None], 0.0, 3.0 * grad / np.where(flat[:, None], 1.0, mass))
    vec = np.concatenate([color, grad], axis=1)
    vec /= np.linalg.norm(vec, axis=1, keepdims=True)
    return vec, flat


def embed_crop(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1 or image.shape[2] != 3:
        raise ValueError(f"crop must be h x w x 3 with h, w >= 1, got {image.shape}")
    vec, flat = describe_batch(image[None])
    return Descriptor(vec[0], bool(flat[0]))


def embed_with_encoder(model, image):
    """Resize to the model input, encode, mean-pool the latent grid, L2-normalize."""
    from .vqcodec import encode

    x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0
    x = tk.resize(x, *model.image_size)
    pooled = encode(model, x).mean(axis=(1, 2))
    norm = np.linalg.norm(pooled)
    if norm == 0:
        return Descriptor(pooled, flat=True)
    return Descriptor(pooled / norm)


class DescriptorCache:
    """Memoizes descriptors by crop content; tile crops repeat constantly."""

    def __init__(self, backend="descriptor", model=None):
        if backend not in ("descriptor", "encoder"):
            raise ValueError(f"unknown embedder backend {backend!r}")
        if backend == "encoder" and model is None:
            raise ValueError("encoder backend needs a model")
        self.backend = backend
        self.model = model
        self.index = {}
        self.vectors = []
        self.flags = []

    def _key(self, image):
        return (image.shape, np.ascontiguousarray(image).tobytes())

    def lookup(self, image):
        """Index of the descriptor for ``image`` in ``self.vectors``."""
        key = self._key(image)
        idx = self.index.get(key)
        if idx is None:
            desc = embed_crop(image) if self.backend == "descriptor" else embed_with_encoder(self.model, image)
            idx = len(self.vectors)
            self.index[key] = idx
            self.vectors.append(desc.vector)
            self.flags.append(desc.flat)
        return idx

    def matrix(self):
        return np.array(self.vectors).reshape(len(self.vectors), -1)
