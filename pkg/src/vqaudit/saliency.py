"""
Per-code Grad-CAM against the encoder.

The target scalar for code c only sees latent positions assigned to c; all
other positions are masked out. Gradients flow from z_e back to a chosen
encoder activation, channel weights are their spatial means, and the map is
ReLU of the weighted channel sum, upsampled to frame size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .errors import ConfigurationError, NumericalError
from .vqcodec import encode, quantize


@dataclass
class SaliencyConfig:
    layer: int | None = None  # encoder layer index; None = last ReLU
    eps: float = 1e-8
    upsample: str = "bilinear"
    target: str = "distance"  # or "inner"

    def resolve_layer(self, model):
        layer = model.default_target_layer() if self.layer is None else self.layer
        if not 0 <= layer < len(model.encoder_layers):
            raise ConfigurationError(f"target layer {layer} outside encoder with {len(model.encoder_layers)} layers")
        return layer


@dataclass
class Heatmap:
    values: np.ndarray  # HxW, >= 0, max 1 unless is_zero
    code: int
    is_zero: bool
    raw_max: float = 0.0
    episode: int = -1
    step: int = -1

    @property
    def source(self):
        return (self.episode, self.step, self.code)


def code_target_scalar(z_e, codebook, code, assignments=None, kind="distance"):
    """Masked quantization score for one code on one latent grid (d, G, G)."""
    codes = np.asarray(codebook, dtype=np.float64)
    if not 0 <= code < len(codes):
        raise ConfigurationError(f"code {code} outside codebook of size {len(codes)}")
    if assignments is None:
        assignments = quantize(z_e, codes).assignments
    sel = assignments == code
    vecs = np.moveaxis(z_e, 0, -1)[sel]
    if kind == "distance":
        return -float(np.sum((vecs - codes[code]) ** 2))
    if kind == "inner":
        return float(np.sum(vecs @ codes[code]))
    raise ConfigurationError(f"unknown target kind {kind!r}")


def target_gradients(z_e, codes, assignments, code_ids, kind="distance"):
    """d(target)/d(z_e) for each code, stacked as (n_codes, d, G, G)."""
    code_ids = np.asarray(code_ids, dtype=np.int64)
    sel = (assignments[None] == code_ids[:, None, None]).astype(np.float64)  # (n, G, G)
    c = codes[code_ids][:, :, None, None]  # (n, d, 1, 1)
    if kind == "distance":
        return -2.0 * (z_e[None] - c) * sel[:, None]
    if kind == "inner":
        return c * sel[:, None]
    raise ConfigurationError(f"unknown target kind {kind!r}")


def backprop_to_layer(model, acts, layer, grad):
    """Push a batch of z_e gradients back to the output of encoder ``layer``."""
    layers = model.encoder_layers
    for i in range(len(layers) - 1, layer, -1):
        lyr = layers[i]
        if lyr["kind"] == "relu":
            grad = tk.relu_backward(grad, acts[i - 1])
        elif lyr["kind"] == "conv":
            grad = tk.conv2d_input_grad(grad, model.encoder[f"{i}.w"], lyr["stride"], lyr["pad"])
        else:
            grad = tk.conv2d_transpose_input_grad(grad, model.encoder[f"{i}.w"], lyr["stride"], lyr["pad"])
    return grad


def gradcam_maps(model, frame, code_ids, config: SaliencyConfig | None = None, forward=None):
    """Raw (unnormalized, target-resolution) Grad-CAM maps for several codes.

    Returns (maps (n, h, w), channel weights (n, C), assignments).
    ``forward`` may pass a precomputed ``encode(..., keep=True)`` result.
    """
    config = config or SaliencyConfig()
    layer = config.resolve_layer(model)
    z_e, acts, _ = forward if forward is not None else encode(model, frame, keep=True)
    assignments = quantize(z_e, model.codes).assignments
    code_ids = np.asarray(code_ids, dtype=np.int64)
    if np.any((code_ids < 0) | (code_ids >= model.K)):
        raise ConfigurationError(f"code ids must lie in [0, {model.K})")
    grad = backprop_to_layer(model, acts, layer, target_gradients(z_e, model.codes, assignments, code_ids, config.target))
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite Grad-CAM gradient")
    activation = acts[layer]
    alpha = grad.mean(axis=(2, 3))
    maps = np.maximum(np.einsum("nc,chw->nhw", alpha, activation), 0.0)
    return maps, alpha, assignments


def finalize(raw, size, config: SaliencyConfig, code, episode=-1, step=-1):
    raw_max = float(raw.max()) if raw.size else 0.0
    h, w = size
    if raw_max <= config.eps:
        return Heatmap(np.zeros((h, w)), int(code), True, raw_max, episode, step)
    up = tk.resize(raw, h, w, config.upsample)
    return Heatmap(up / up.max(), int(code), False, raw_max, episode, step)


def gradcam(model, frame, code, config: SaliencyConfig | None = None, episode=-1, step=-1):
    config = config or SaliencyConfig()
    maps, _, _ = gradcam_maps(model, frame, [code], config)
    return finalize(maps[0], model.image_size, config, code, episode, step)


def gradcam_selected(model, frame, config: SaliencyConfig | None = None, episode=-1, step=-1, extra_codes=()):
    """Heatmaps for every code selected in ``frame`` (plus any ``extra_codes``).

    Returns (heatmaps sorted by code, assignments).
    """
    config = config or SaliencyConfig()
    forward = encode(model, frame, keep=True)
    assignments = quantize(forward[0], model.codes).assignments
    code_ids = sorted(set(np.unique(assignments).tolist()) | set(int(c) for c in extra_codes))
    maps, _, _ = gradcam_maps(model, frame, code_ids, config, forward=forward)
    heatmaps = [finalize(m, model.image_size, config, c, episode, step) for m, c in zip(maps, code_ids)]
    return heatmaps, assignments


def filter_zero(heatmaps, eps=1e-8):
    """Drop all-zero heatmaps. Returns (kept, dropped count, dropped fraction)."""
    kept = [h for h in heatmaps if h.values.size and float(h.values.max()) > eps]
    dropped = len(heatmaps) - len(kept)
    fraction = dropped / len(heatmaps) if heatmaps else 0.0
    return kept, dropped, fraction
