"""
Dense float64 numerics with hand-written forward/backward passes.

Every layer follows the same convention: ``*_forward`` returns ``(out, cache)``
and ``*_backward(grad_out, cache)`` returns the gradients. Images are
channels-first; a batch axis is optional (``C,H,W`` or ``N,C,H,W``).

Kernel layouts:
- conv2d:            (out_channels, in_channels, k, k)
- conv2d_transpose:  (in_channels, out_channels, k, k)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, UsageError

DTYPE = np.float64


def _as_batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigurationError(f"expected CxHxW or NxCxHxW input, got ndim={x.ndim}")


def _windows(xp, k, stride, out_h, out_w):
    # (N, C, out_h, out_w, k, k) view; no copy
    n, c, _, _ = xp.shape
    s_n, s_c, s_h, s_w = xp.strides
    return as_strided(
        xp,
        shape=(n, c, out_h, out_w, k, k),
        strides=(s_n, s_c, s_h * stride, s_w * stride, s_h, s_w),
        writeable=False,
    )


def _im2col(xp, k, stride, out_h, out_w):
    """(C*k*k, N*out_h*out_w) column matrix."""
    n, c = xp.shape[:2]
    win = _windows(xp, k, stride, out_h, out_w).transpose(1, 4, 5, 0, 2, 3)
    return win.reshape(c * k * k, n * out_h * out_w)


def _col2im(cols, n, c, k, stride, out_h, out_w, full_h, full_w):
    """Scatter-add (C, k, k, N, out_h, out_w) columns into an (N, C, full_h, full_w) image."""
    cols = cols.reshape(c, k, k, n, out_h, out_w)
    if stride == k and full_h == k * out_h and full_w == k * out_w:
        # non-overlapping windows: a pure reshape
        img = cols.transpose(3, 0, 4, 1, 5, 2).reshape(n, c, full_h, full_w)
        return np.ascontiguousarray(img)
    if k % stride == 0 and stride > 1:
        # split offsets i = stride*a + r: each phase r gets contiguous shifted adds
        m = k // stride
        ph, pw = out_h + m - 1, out_w + m - 1
        phases = np.zeros((stride, stride, c, n, ph, pw), dtype=DTYPE)
        for i in range(k):
            a, r = divmod(i, stride)
            for j in range(k):
                b, q = divmod(j, stride)
                phases[r, q, :, :, a:a + out_h, b:b + out_w] += cols[:, i, j]
        img = phases.transpose(3, 2, 4, 0, 5, 1).reshape(n, c, ph * stride, pw * stride)
        return img[:, :, :full_h, :full_w]
    img = np.zeros((c, n, full_h, full_w), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            img[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += cols[:, i, j]
    return img.transpose(1, 0, 2, 3)


def _channels_major(g):
    """(N, C, H, W) -> (C, N*H*W)."""
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def _from_channels_major(m, n, h, w):
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def conv_output_size(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        return None
    return span // stride + 1


def _check_conv_args(x, kernels, bias, stride, padding, transpose):
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    layout = "CxOxkxk" if transpose else "OxCxkxk"
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ConfigurationError(f"kernels must be {layout}, got shape {kernels.shape}")
    c = x.shape[1]
    kc = kernels.shape[0] if transpose else kernels.shape[1]
    o = kernels.shape[1] if transpose else kernels.shape[0]
    if kc != c:
        raise ConfigurationError(f"in_channels mismatch: input has {c}, kernels expect {kc}")
    if bias.shape != (o,):
        raise ConfigurationError(f"bias length {bias.shape} does not match out_channels {o}")
    return o


def conv2d_forward(x, kernels, bias, stride=1, padding=0):
    x, squeeze = _as_batch(x)
    kernels = np.asarray(kernels, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    o = _check_conv_args(x, kernels, bias, stride, padding, transpose=False)
    n, c, h, w = x.shape
    k = kernels.shape[2]
    out_h = conv_output_size(h, k, stride, padding)
    out_w = conv_output_size(w, k, stride, padding)
    if out_h is None or out_h < 1:
        raise ConfigurationError(f"height {h} incompatible with k={k}, stride={stride}, padding={padding}")
    if out_w is None or out_w < 1:
        raise ConfigurationError(f"width {w} incompatible with k={k}, stride={stride}, padding={padding}")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, out_h, out_w)
    out = kernels.reshape(o, -1) @ cols
    out += bias[:, None]
    out = _from_channels_major(out, n, out_h, out_w)
    cache = {"x_shape": x.shape, "cols": cols, "kernels": kernels, "stride": stride,
             "padding": padding, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def conv2d_backward(grad_out, cache, input_grad=True):
    """Returns (grad_input, grad_kernels, grad_bias); grad_input is None if not ``input_grad``."""
    if cache is None:
        raise UsageError("conv2d_backward called without a forward cache")
    g, _ = _as_batch(grad_out)
    n, c, h, w = cache["x_shape"]
    kernels, stride, padding = cache["kernels"], cache["stride"], cache["padding"]
    o, _, k, _ = kernels.shape
    out_h = conv_output_size(h, k, stride, padding)
    out_w = conv_output_size(w, k, stride, padding)
    if g.shape != (n, o, out_h, out_w):
        raise ConfigurationError(f"grad_out shape {g.shape} != forward output shape {(n, o, out_h, out_w)}")

    gm = _channels_major(g)
    grad_k = (gm @ cache["cols"].T).reshape(kernels.shape)
    grad_b = gm.sum(axis=1)
    if not input_grad:
        return None, grad_k, grad_b
    dx = _conv2d_input_grad(gm, kernels, (n, c, h, w), stride, padding, out_h, out_w)
    return (dx[0] if cache["squeeze"] else dx), grad_k, grad_b


def _conv2d_input_grad(gm, kernels, x_shape, stride, padding, out_h, out_w):
    n, c, h, w = x_shape
    o, _, k, _ = kernels.shape
    dcols = kernels.reshape(o, -1).T @ gm
    dxp = _col2im(dcols, n, c, k, stride, out_h, out_w, h + 2 * padding, w + 2 * padding)
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]) if padding else dxp


def conv2d_input_grad(grad_out, kernels, stride=1, padding=0):
    """Gradient w.r.t. the input only; needs no forward cache, so any batch size works."""
    g, squeeze = _as_batch(grad_out)
    kernels = np.asarray(kernels, dtype=DTYPE)
    n, o, out_h, out_w = g.shape
    k = kernels.shape[2]
    h = (out_h - 1) * stride + k - 2 * padding
    w = (out_w - 1) * stride + k - 2 * padding
    dx = _conv2d_input_grad(_channels_major(g), kernels, (n, kernels.shape[1], h, w), stride, padding, out_h, out_w)
    return dx[0] if squeeze else dx


def conv2d_transpose_forward(x, kernels, bias, stride=1, padding=0):
    """Gradient-of-convolution ("deconvolution"). Output size (H-1)*stride - 2*padding + k."""
    x, squeeze = _as_batch(x)
    kernels = np.asarray(kernels, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    o = _check_conv_args(x, kernels, bias, stride, padding, transpose=True)
    n, c, h, w = x.shape
    k = kernels.shape[2]
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    if full_h - 2 * padding < 1:
        raise ConfigurationError(f"height {h} with k={k}, stride={stride}, padding={padding} gives empty output")
    if full_w - 2 * padding < 1:
        raise ConfigurationError(f"width {w} with k={k}, stride={stride}, padding={padding} gives empty output")

    xm = _channels_major(x)
    cols = kernels.reshape(c, -1).T @ xm
    full = _col2im(cols, n, o, k, stride, h, w, full_h, full_w)
    out = full[:, :, padding:full_h - padding, padding:full_w - padding].copy() if padding else full
    out += bias[None, :, None, None]
    cache = {"xm": xm, "x_shape": x.shape, "kernels": kernels, "stride": stride,
             "padding": padding, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def conv2d_transpose_backward(grad_out, cache):
    if cache is None:
        raise UsageError("conv2d_transpose_backward called without a forward cache")
    g, _ = _as_batch(grad_out)
    n, c, h, w = cache["x_shape"]
    kernels, stride, padding = cache["kernels"], cache["stride"], cache["padding"]
    _, o, k, _ = kernels.shape
    full_h, full_w = (h - 1) * stride + k, (w - 1) * stride + k
    expected = (n, o, full_h - 2 * padding, full_w - 2 * padding)
    if g.shape != expected:
        raise ConfigurationError(f"grad_out shape {g.shape} != forward output shape {expected}")

    grad_b = g.sum(axis=(0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else np.ascontiguousarray(g)
    gcols = _im2col(gp, k, stride, h, w)
    dx = _from_channels_major(kernels.reshape(c, -1) @ gcols, n, h, w)
    grad_k = (cache["xm"] @ gcols.T).reshape(kernels.shape)
    return (dx[0] if cache["squeeze"] else dx), grad_k, grad_b


def conv2d_transpose_input_grad(grad_out, kernels, stride=1, padding=0):
    """Input gradient of a transposed conv, without a forward cache."""
    g, squeeze = _as_batch(grad_out)
    kernels = np.asarray(kernels, dtype=DTYPE)
    n, _, gh, gw = g.shape
    c, _, k, _ = kernels.shape
    h = (gh + 2 * padding - k) // stride + 1
    w = (gw + 2 * padding - k) // stride + 1
    gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else np.ascontiguousarray(g)
    dx = _from_channels_major(kernels.reshape(c, -1) @ _im2col(gp, k, stride, h, w), n, h, w)
    return dx[0] if squeeze else dx


def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0), x


def relu_backward(grad_out, cache):
    if cache is None:
        raise UsageError("relu_backward called without a forward cache")
    # derivative at exactly 0 is 0
    return grad_out * (cache > 0)


def mse_loss(a, b):
    """Mean squared error and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ConfigurationError(f"mse_loss shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class ParamSet:
    """Named parameters with matching gradients and Adam moments."""

    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value):
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self):
        return ParamSet(
            params={k: v.copy() for k, v in self.params.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step,
        )


def adam_step(params: ParamSet, learning_rate=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
    """One bias-corrected Adam update, in place. Returns ``params``."""
    if not learning_rate > 0:
        raise ConfigurationError(f"learning rate must be positive, got {learning_rate}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.params.items():
        g = params.grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= learning_rate * (m / c1) / (np.sqrt(v / c2) + epsilon)
    return params


@lru_cache(maxsize=256)
def _interp_matrix(in_size, out_size, method):
    mat = np.zeros((out_size, in_size), dtype=DTYPE)
    scale = in_size / out_size
    rows = np.arange(out_size)
    if method == "nearest":
        src = np.minimum(np.floor((rows + 0.5) * scale).astype(int), in_size - 1)
        mat[rows, src] = 1.0
        return mat
    if method != "bilinear":
        raise ConfigurationError(f"unknown interpolation method {method!r}")
    src = np.clip((rows + 0.5) * scale - 0.5, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def interp_matrix(in_size, out_size, method="bilinear"):
    """Row-stochastic (out_size, in_size) resampling matrix.

    Half-pixel centers with edge clamping, i.e. ``align_corners=False``.
    """
    mat = _interp_matrix(int(in_size), int(out_size), method)
    mat.flags.writeable = False
    return mat


def resize(img, out_h, out_w, method="bilinear"):
    """Resize the last two axes of ``img``."""
    img = np.asarray(img, dtype=DTYPE)
    mh = interp_matrix(img.shape[-2], out_h, method)
    mw = interp_matrix(img.shape[-1], out_w, method)
    return mh @ img @ mw.T
