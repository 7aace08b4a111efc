"""
Convolutional VQ autoencoder: encoder, nearest-code quantizer, decoder,
straight-through training, checkpoints, and a hand-built oracle model.

Latents are channels-first: ``z_e`` has shape (d, G, G) for one frame and
(N, d, G, G) for a batch; assignments are (G, G) / (N, G, G).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import sprites as sp
from . import tensorkit as tk
from .errors import ConfigurationError, LoadError, NumericalError
from .tensorkit import ParamSet

MAGIC = b"VQAUDIT1"
FORMAT_VERSION = 1


def default_architecture(d=16):
    encoder = [
        {"kind": "conv", "in": 3, "out": 32, "k": 4, "stride": 2, "pad": 1},
        {"kind": "relu"},
        {"kind": "conv", "in": 32, "out": 64, "k": 4, "stride": 4, "pad": 0},
        {"kind": "relu"},
        {"kind": "conv", "in": 64, "out": d, "k": 3, "stride": 1, "pad": 1},
    ]
    decoder = [
        {"kind": "convT", "in": d, "out": 64, "k": 3, "stride": 1, "pad": 1},
        {"kind": "relu"},
        {"kind": "convT", "in": 64, "out": 32, "k": 4, "stride": 4, "pad": 0},
        {"kind": "relu"},
        {"kind": "convT", "in": 32, "out": 3, "k": 4, "stride": 2, "pad": 1},
    ]
    return encoder, decoder


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 5000
    learning_rate: float = 3e-4
    beta: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError(f"commitment weight must be >= 0, got {self.beta}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class QuantizedLatent:
    assignments: np.ndarray
    z_e: np.ndarray
    z_q: np.ndarray


@dataclass
class VQCodecModel:
    encoder_layers: list
    decoder_layers: list
    encoder: ParamSet
    decoder: ParamSet
    codebook: ParamSet
    image_size: tuple = (64, 64)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def codes(self):
        return self.codebook.params["codes"]

    @property
    def K(self):
        return self.codes.shape[0]

    @property
    def d(self):
        return self.codes.shape[1]

    def default_target_layer(self):
        """Index of the last encoder ReLU (falls back to the last layer)."""
        relus = [i for i, layer in enumerate(self.encoder_layers) if layer["kind"] == "relu"]
        return relus[-1] if relus else len(self.encoder_layers) - 1

    def layer_shapes(self):
        """Per-layer output shapes (C, H, W) for one frame, encoder then decoder."""
        shape = (3, *self.image_size)
        enc = []
        for layer in self.encoder_layers:
            shape = _layer_out_shape(layer, shape)
            enc.append(shape)
        dec = []
        for layer in self.decoder_layers:
            shape = _layer_out_shape(layer, shape)
            dec.append(shape)
        return enc, dec

    @property
    def grid_size(self):
        enc, _ = self.layer_shapes()
        return enc[-1][1]

    def architecture(self):
        return {"encoder": self.encoder_layers, "decoder": self.decoder_layers,
                "image_size": list(self.image_size), "K": self.K, "d": self.d}


def _layer_out_shape(layer, shape):
    c, h, w = shape
    kind = layer["kind"]
    if kind == "relu":
        return shape
    if layer["in"] != c:
        raise ConfigurationError(f"layer {layer} expects {layer['in']} channels, receives {c}")
    k, s, p = layer["k"], layer["stride"], layer["pad"]
    if kind == "conv":
        oh, ow = tk.conv_output_size(h, k, s, p), tk.conv_output_size(w, k, s, p)
        if not oh or not ow:
            raise ConfigurationError(f"layer {layer} does not tile a {h}x{w} input")
        return (layer["out"], oh, ow)
    if kind == "convT":
        return (layer["out"], (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k)
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def _init_params(layers, rng, transpose_ok=True):
    ps = ParamSet()
    for i, layer in enumerate(layers):
        if layer["kind"] == "relu":
            continue
        k = layer["k"]
        if layer["kind"] == "conv":
            shape = (layer["out"], layer["in"], k, k)
            fan_in = layer["in"] * k * k
        else:
            shape = (layer["in"], layer["out"], k, k)
            # effective fan-in of a transposed conv: in * (k/stride)^2
            fan_in = max(1.0, layer["in"] * (k / layer["stride"]) ** 2)
        ps.add(f"{i}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        ps.add(f"{i}.b", np.zeros(layer["out"]))
    return ps


def build_model(K=64, d=16, seed=0, image_size=(64, 64)):
    if K < 1 or d < 1:
        raise ConfigurationError(f"codebook needs K >= 1 and d >= 1, got K={K}, d={d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    enc_layers, dec_layers = default_architecture(d)
    model = VQCodecModel(
        enc_layers, dec_layers,
        _init_params(enc_layers, rng), _init_params(dec_layers, rng),
        ParamSet(), tuple(image_size), seed,
    )
    model.codebook.add("codes", rng.normal(0.0, 0.02, size=(K, d)))
    enc, dec = model.layer_shapes()
    if enc[-1][0] != d or dec[-1] != (3, *image_size):
        raise ConfigurationError(f"architecture does not round-trip {image_size}: encoder {enc[-1]}, decoder {dec[-1]}")
    return model


# --- forward / backward through a layer stack ---------------------------

def forward_layers(layers, params, x):
    """Returns (output, activations per layer, caches per layer)."""
    acts, caches = [], []
    h = x
    for i, layer in enumerate(layers):
        kind = layer["kind"]
        if kind == "relu":
            h, cache = tk.relu_forward(h)
        elif kind == "conv":
            h, cache = tk.conv2d_forward(h, params[f"{i}.w"], params[f"{i}.b"], layer["stride"], layer["pad"])
        elif kind == "convT":
            h, cache = tk.conv2d_transpose_forward(h, params[f"{i}.w"], params[f"{i}.b"], layer["stride"], layer["pad"])
        else:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
        acts.append(h)
        caches.append(cache)
    return h, acts, caches


def backward_layers(layers, params, caches, grad, stop=0, accumulate=True, input_grad=True):
    """Backpropagate ``grad`` from the stack output down to the input of layer ``stop``.

    Parameter gradients are added into ``params.grads`` when ``accumulate``.
    ``input_grad=False`` skips the gradient w.r.t. the stack input.
    """
    for i in range(len(layers) - 1, stop - 1, -1):
        kind = layers[i]["kind"]
        if kind == "relu":
            grad = tk.relu_backward(grad, caches[i])
            continue
        if kind == "conv":
            grad, gw, gb = tk.conv2d_backward(grad, caches[i], input_grad=i > stop or input_grad)
        else:
            grad, gw, gb = tk.conv2d_transpose_backward(grad, caches[i])
        if accumulate:
            params.grads[f"{i}.w"] += gw
            params.grads[f"{i}.b"] += gb
    return grad


def frames_to_input(frames):
    """uint8 HxWx3 (or NxHxWx3) -> float64 channels-first in [0, 1]."""
    x = np.asarray(frames)
    if x.ndim == 3:
        return x.transpose(2, 0, 1).astype(np.float64) / 255.0
    return x.transpose(0, 3, 1, 2).astype(np.float64) / 255.0


def _check_input(model, x):
    if tuple(x.shape[-2:]) != tuple(model.image_size) or x.shape[-3] != 3:
        raise ConfigurationError(f"model expects 3x{model.image_size[0]}x{model.image_size[1]} input, got {x.shape}")


def encode(model, frame, keep=False):
    """Encoder forward pass. With ``keep`` also returns (activations, caches)."""
    x = frames_to_input(frame) if np.asarray(frame).dtype == np.uint8 else np.asarray(frame, dtype=np.float64)
    _check_input(model, x)
    z_e, acts, caches = forward_layers(model.encoder_layers, model.encoder, x)
    return (z_e, acts, caches) if keep else z_e


def decode(model, z_q, keep=False):
    out, acts, caches = forward_layers(model.decoder_layers, model.decoder, z_q)
    return (out, acts, caches) if keep else out


def to_image(recon):
    """Clamp a (3,H,W) reconstruction to [0,1] and convert to uint8 HxWx3."""
    return np.rint(np.clip(recon, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def nearest_codes(vectors, codes, chunk=128):
    """argmin_i ||v - c_i||^2 per row, ties to the lowest index."""
    vectors = np.asarray(vectors, dtype=np.float64)
    out = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), chunk):
        v = vectors[start:start + chunk]
        diff = v[:, None, :] - codes[None, :, :]
        out[start:start + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out


def quantize(z_e, codebook):
    codes = codebook.codes if isinstance(codebook, VQCodecModel) else np.asarray(codebook, dtype=np.float64)
    z_e = np.asarray(z_e, dtype=np.float64)
    d_axis = z_e.ndim - 3
    if z_e.shape[d_axis] != codes.shape[1]:
        raise ConfigurationError(f"latent depth {z_e.shape[d_axis]} != codebook dimension {codes.shape[1]}")
    if not np.all(np.isfinite(z_e)):
        raise NumericalError("quantize received non-finite z_e")
    moved = np.moveaxis(z_e, d_axis, -1)
    flat = moved.reshape(-1, codes.shape[1])
    assign = nearest_codes(flat, codes).reshape(moved.shape[:-1])
    z_q = np.moveaxis(codes[assign], -1, d_axis)
    return QuantizedLatent(assign, z_e, np.ascontiguousarray(z_q))


# --- training ------------------------------------------------------------

def _first_nonfinite(named):
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


def vq_losses(z_e, z_q):
    """Codebook and (unweighted) commitment terms with their gradients.

    Returns (codebook_loss, commitment_loss, grad wrt z_q, grad wrt z_e);
    each term stops the gradient through the other argument.
    """
    diff = z_q - z_e
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    return loss, loss, g, -g


def training_step(model, batch, config: TrainConfig):
    """One straight-through VQ-VAE update. Returns (recon, codebook, commitment) losses."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or len(x) == 0:
        raise ConfigurationError("training batch must be a nonempty NxCxHxW array")
    _check_input(model, x)
    for ps in (model.encoder, model.decoder, model.codebook):
        ps.zero_grad()

    z_e, _, enc_caches = forward_layers(model.encoder_layers, model.encoder, x)
    q = quantize(z_e, model.codes) if np.all(np.isfinite(z_e)) else None
    if q is None:
        raise NumericalError("non-finite tensor: encoder output z_e")
    recon, _, dec_caches = forward_layers(model.decoder_layers, model.decoder, q.z_q)
    recon_loss, g_recon = tk.mse_loss(recon, x)
    cb_loss, commit_loss, g_codes_zq, g_commit_ze = vq_losses(z_e, q.z_q)
    bad = _first_nonfinite([("reconstruction", recon), ("z_q", q.z_q)])
    if bad or not np.isfinite(recon_loss + cb_loss):
        raise NumericalError(f"non-finite tensor: {bad or 'loss'}")

    g_zq = backward_layers(model.decoder_layers, model.decoder, dec_caches, g_recon)
    # straight-through: z_q's gradient is handed to z_e unchanged
    g_ze = g_zq + config.beta * g_commit_ze
    backward_layers(model.encoder_layers, model.encoder, enc_caches, g_ze, input_grad=False)

    d = model.d
    used = np.unique(q.assignments)
    g_rows = np.moveaxis(g_codes_zq, 1, -1).reshape(-1, d)
    np.add.at(model.codebook.grads["codes"], q.assignments.ravel(), g_rows)

    for ps, label in ((model.encoder, "encoder"), (model.decoder, "decoder"), (model.codebook, "codebook")):
        bad = _first_nonfinite((f"{label} grad {n}", g) for n, g in ps.grads.items())
        if bad:
            raise NumericalError(f"non-finite tensor: {bad}")

    # codes unused in this batch stay exactly as they are, moments included
    idle = np.setdiff1d(np.arange(model.K), used)
    saved = [(a[idle].copy()) for a in (model.codes, model.codebook.m["codes"], model.codebook.v["codes"])]
    for ps in (model.encoder, model.decoder, model.codebook):
        tk.adam_step(ps, config.learning_rate)
    for arr, keep in zip((model.codes, model.codebook.m["codes"], model.codebook.v["codes"]), saved):
        arr[idle] = keep
    return recon_loss, cb_loss, commit_loss


def reconstruction_mse(model, x, batch_size=64):
    total, count = 0.0, 0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        z_e = encode(model, xb)
        recon = decode(model, quantize(z_e, model.codes).z_q)
        total += float(np.sum((recon - xb) ** 2))
        count += recon.size
    return total / count


def train(model, frames, config: TrainConfig, log=None, log_every=100):
    """Train on uint8 frames (N,H,W,3). Returns per-step loss history."""
    x = frames_to_input(frames)
    if len(x) == 0:
        raise ConfigurationError("no training frames")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    history = []
    for step in range(config.steps):
        idx = rng.integers(0, len(x), size=config.batch_size)
        losses = training_step(model, x[idx], config)
        history.append(losses)
        if log is not None and (step % log_every == 0 or step == config.steps - 1):
            log(step, *losses)
    return history


# --- oracle model ---------------------------------------------------------

def build_oracle_model(sprite_table=None, codebook_size=None):
    """Hand-built codec that assigns code i exactly where entity i is drawn.

    Encoder: an 8x8/stride-8 conv whose kernels are the pseudo-inverse of the
    sprite matrix (one-hot per tile), ReLU, a 4x4/stride-4 transposed conv
    that places a 2x2 bump at each cell centre, ReLU, and a 4x4/stride-4
    pooling conv that yields z_e = 0.5 * one-hot. Codes are unit vectors, the
    decoder paints sprite i for code i.
    """
    table = sp.SPRITES if sprite_table is None else np.asarray(sprite_table)
    n, t = table.shape[0], table.shape[1]
    K = n if codebook_size is None else int(codebook_size)
    if K < n:
        raise ConfigurationError(f"codebook size {K} smaller than sprite count {n}")
    sprites = table.transpose(0, 3, 1, 2).astype(np.float64) / 255.0  # (n, 3, t, t)
    mat = sprites.reshape(n, -1).T  # (3*t*t, n)
    if np.linalg.matrix_rank(mat) < n:
        raise ConfigurationError("sprite table is not linearly independent; oracle cannot separate tiles")
    proj = np.zeros((K, mat.shape[0]))
    proj[:n] = np.linalg.pinv(mat)

    enc_layers = [
        {"kind": "conv", "in": 3, "out": K, "k": t, "stride": t, "pad": 0},
        {"kind": "relu"},
        {"kind": "convT", "in": K, "out": K, "k": 4, "stride": 4, "pad": 0},
        {"kind": "relu"},
        {"kind": "conv", "in": K, "out": K, "k": 4, "stride": 4, "pad": 0},
    ]
    dec_layers = [{"kind": "convT", "in": K, "out": 3, "k": t, "stride": t, "pad": 0}]
    enc, dec, cb = ParamSet(), ParamSet(), ParamSet()
    enc.add("0.w", proj.reshape(K, 3, t, t))
    enc.add("0.b", np.zeros(K))
    bump = np.zeros((4, 4))
    bump[1:3, 1:3] = 1.0
    enc.add("2.w", np.einsum("ij,uv->ijuv", np.eye(K), bump))
    enc.add("2.b", np.zeros(K))
    enc.add("4.w", np.einsum("ij,uv->ijuv", np.eye(K), np.full((4, 4), 0.125)))
    enc.add("4.b", np.zeros(K))
    kern = np.zeros((K, 3, t, t))
    kern[:n] = sprites
    dec.add("0.w", kern)
    dec.add("0.b", np.zeros(3))
    cb.add("codes", np.eye(K))
    return VQCodecModel(enc_layers, dec_layers, enc, dec, cb, (8 * t, 8 * t), 0, {"oracle": True})


# --- checkpoints -------------------------------------------------------------

def _tensor_order(model):
    out = []
    for prefix, ps in (("encoder", model.encoder), ("decoder", model.decoder), ("codebook", model.codebook)):
        for name in ps.names():
            out.append((f"{prefix}/{name}", ps.params[name]))
    return out


def save_checkpoint(model, path):
    tensors = _tensor_order(model)
    payload = b"".join(np.asarray(arr, dtype="<f4").tobytes() for _, arr in tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture(),
        "K": model.K, "d": model.d, "seed": model.seed, "meta": model.meta,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return header["checksum"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise LoadError(f"{path}: bad magic (expected {MAGIC!r})")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = blob[start + hlen:]
    expected = sum(4 * int(np.prod(t["shape"])) for t in header["tensors"])
    if len(payload) != expected:
        raise LoadError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise LoadError(f"{path}: checksum mismatch")

    arch = header["architecture"]
    sets = {"encoder": ParamSet(), "decoder": ParamSet(), "codebook": ParamSet()}
    offset = 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(t["shape"])
        offset += 4 * count
        prefix, name = t["name"].split("/", 1)
        sets[prefix].add(name, arr)
    return VQCodecModel(arch["encoder"], arch["decoder"], sets["encoder"], sets["decoder"], sets["codebook"],
                        tuple(arch["image_size"]), header["seed"], header.get("meta", {}))


def checkpoint_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
