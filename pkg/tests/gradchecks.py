"""Finite-difference checks of every hand-written backward pass.

Each ``check_*`` function draws one random small instance and returns the
worst relative error between analytic and central-difference gradients.
"""
import copy

import numpy as np

from oracles import numeric_grad, rel_error
from vqaudit import tensorkit as tk
from vqaudit.vqcodec import TrainConfig, build_model, decode, encode, quantize, training_step, vq_losses


def _conv_geometry(rng):
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k > 1 else 0
    out = int(rng.integers(2, 5))
    size = (out - 1) * stride + k - 2 * pad
    if size < 1:
        pad, size = 0, (out - 1) * stride + k
    return k, stride, pad, size


def check_conv(rng):
    k, stride, pad, size = _conv_geometry(rng)
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, c, size, size))
    w = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o)
    out, cache = tk.conv2d_forward(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)
    dx, dw, db = tk.conv2d_backward(r, cache)

    def loss():
        return float(np.sum(tk.conv2d_forward(x, w, b, stride, pad)[0] * r))

    return max(rel_error(dx, numeric_grad(loss, x)), rel_error(dw, numeric_grad(loss, w)),
               rel_error(db, numeric_grad(loss, b)))


def check_conv_transpose(rng):
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k > 1 else 0
    size = int(rng.integers(2, 4))
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, c, size, size))
    w = rng.normal(size=(c, o, k, k))
    b = rng.normal(size=o)
    out, cache = tk.conv2d_transpose_forward(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)
    dx, dw, db = tk.conv2d_transpose_backward(r, cache)

    def loss():
        return float(np.sum(tk.conv2d_transpose_forward(x, w, b, stride, pad)[0] * r))

    return max(rel_error(dx, numeric_grad(loss, x)), rel_error(dw, numeric_grad(loss, w)),
               rel_error(db, numeric_grad(loss, b)))


def check_relu(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.normal(size=x.shape)
    out, cache = tk.relu_forward(x)
    dx = tk.relu_backward(r, cache)
    return rel_error(dx, numeric_grad(lambda: float(np.sum(tk.relu_forward(x)[0] * r)), x))


def check_mse(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 3, 4))
    _, g = tk.mse_loss(a, b)
    return rel_error(g, numeric_grad(lambda: tk.mse_loss(a, b)[0], a))


def _sample_entries(rng, arr, count):
    flat = rng.choice(arr.size, size=min(count, arr.size), replace=False)
    return [np.unravel_index(i, arr.shape) for i in flat]


def _fd_entries(f, arr, idxs, h=1e-6):
    """Central differences of ``f() -> (loss, relu_pattern)`` at selected entries.

    Entries whose perturbation flips any ReLU are returned as NaN: the loss is
    not differentiable across the kink, so the difference quotient is not a
    gradient there.
    """
    _, base = f()
    out = []
    for idx in idxs:
        old = arr[idx]
        arr[idx] = old + h
        fp, pp = f()
        arr[idx] = old - h
        fm, pm = f()
        arr[idx] = old
        smooth = np.array_equal(pp, base) and np.array_equal(pm, base)
        out.append((fp - fm) / (2 * h) if smooth else np.nan)
    return np.array(out)


def _relu_pattern(acts_and_layers):
    parts = []
    for acts, layers in acts_and_layers:
        for i, layer in enumerate(layers):
            if layer["kind"] == "relu":
                parts.append((acts[i - 1] > 0).ravel())
    return np.concatenate(parts)


def _compare(analytic, numeric, skipped):
    keep = ~np.isnan(numeric)
    skipped.append(int((~keep).sum()))
    return rel_error(analytic[keep], numeric[keep]) if keep.any() else 0.0


def check_vq_step(rng, entries=12, skipped=None):
    """Straight-through training gradients for every parameter group.

    Encoder: exact gradient of the straight-through surrogate
    MSE(dec(z_e + const), x) + beta * mean((z_e - z_q)^2) with the
    quantization offset held fixed. Decoder: reconstruction loss with z_q
    fixed. Codebook: codebook loss with assignments fixed.
    """
    skipped = [] if skipped is None else skipped
    model = build_model(K=6, d=3, seed=int(rng.integers(1 << 30)), image_size=(16, 16))
    x = rng.uniform(size=(2, 3, 16, 16))
    cfg = TrainConfig(batch_size=2, steps=1, beta=0.25)
    probe = copy.deepcopy(model)
    training_step(probe, x, cfg)

    z_e0 = encode(model, x)
    q = quantize(z_e0, model.codes)
    offset = q.z_q - z_e0
    z_q_fixed = q.z_q.copy()
    errors = []

    def surrogate():
        z_e, enc_acts, _ = encode(model, x, keep=True)
        recon, dec_acts, _ = decode(model, z_e + offset, keep=True)
        loss = tk.mse_loss(recon, x)[0] + cfg.beta * float(np.mean((z_e - z_q_fixed) ** 2))
        return loss, _relu_pattern([(enc_acts, model.encoder_layers), (dec_acts, model.decoder_layers)])

    for name in model.encoder.names():
        arr = model.encoder.params[name]
        idxs = _sample_entries(rng, arr, entries)
        analytic = np.array([probe.encoder.grads[name][i] for i in idxs])
        errors.append(_compare(analytic, _fd_entries(surrogate, arr, idxs), skipped))

    def recon_loss():
        recon, dec_acts, _ = decode(model, z_q_fixed, keep=True)
        return tk.mse_loss(recon, x)[0], _relu_pattern([(dec_acts, model.decoder_layers)])

    for name in model.decoder.names():
        arr = model.decoder.params[name]
        idxs = _sample_entries(rng, arr, entries)
        analytic = np.array([probe.decoder.grads[name][i] for i in idxs])
        errors.append(_compare(analytic, _fd_entries(recon_loss, arr, idxs), skipped))

    codes = model.codebook.params["codes"]
    assign = q.assignments

    def codebook_loss():
        return vq_losses(z_e0, np.moveaxis(codes[assign], -1, 1))[0], np.zeros(0)

    used = np.unique(assign)
    idxs = [(int(k), j) for k in used for j in range(codes.shape[1])]
    analytic = np.array([probe.codebook.grads["codes"][i] for i in idxs])
    errors.append(_compare(analytic, _fd_entries(codebook_loss, codes, idxs), skipped))
    return max(errors)


def check_vq_losses(rng):
    z_e = rng.normal(size=(2, 3, 4, 4))
    z_q = rng.normal(size=(2, 3, 4, 4))
    _, _, g_q, g_e = vq_losses(z_e, z_q)
    e1 = rel_error(g_q, numeric_grad(lambda: vq_losses(z_e, z_q)[0], z_q))
    e2 = rel_error(g_e, numeric_grad(lambda: vq_losses(z_e, z_q)[1], z_e))
    return max(e1, e2)


CHECKS = {
    "conv": check_conv,
    "conv_transpose": check_conv_transpose,
    "relu": check_relu,
    "mse": check_mse,
    "vq_losses": check_vq_losses,
    "vq_straight_through": check_vq_step,
}


def run_all(instances=20, seed=0):
    """Worst relative error per check over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    return {name: max(fn(rng) for _ in range(instances)) for name, fn in CHECKS.items()}
