"""Differentiable layers: conv2d, max-pool, linear, BiLSTM, batchnorm,
and the affine spatial-transformer sampler.

Layers own their parameter tensors and expose ``params()`` as an ordered
name -> Tensor mapping so models can assemble flat checkpoints.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeMismatch
from .tensor import Tensor, make_op


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def uniform_init(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Layer:
    def params(self) -> dict:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


# ---------------------------------------------------------------------------
# convolution

_COL_CACHE_BYTES = 64 * 1024 * 1024  # keep im2col matrices up to this size


def _im2col(x, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, x_shape, kh, kw, sh, sw, ph, pw, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += d[:, :, i, j]
    if ph or pw:
        return dxp[:, :, ph : ph + h, pw : pw + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation with bias, differentiable w.r.t. x, weight, bias."""
    if x.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    co, ci, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    n, _, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    cols, ho, wo = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    # Retaining every column matrix until backward dominates peak memory, so
    # only small ones are kept; large ones are rebuilt inside bwd.
    saved = cols if cols.nbytes <= _COL_CACHE_BYTES else None
    del cols

    def bwd(g):
        cols = saved if saved is not None else _im2col(x.data, kh, kw, sh, sw, ph, pw)[0]
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        dw = (gflat.T @ cols).reshape(weight.shape)
        db = gflat.sum(axis=0)
        dx = _col2im(gflat @ wmat, x.shape, kh, kw, sh, sw, ph, pw, ho, wo)
        return dx, dw, db

    return make_op(np.ascontiguousarray(out), (x, weight, bias), bwd, "conv2d")


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1), padding=(0, 0), *, rng, dtype=np.float32):
        kh, kw = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kh * kw
        self.weight = kaiming_uniform(rng, (out_ch, in_ch, kh, kw), fan_in, dtype)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor, window, stride=None) -> Tensor:
    """Per-window max; gradient routes to the first argmax element of each
    window, so tie-breaking is deterministic."""
    kh, kw = window
    sh, sw = stride if stride is not None else window
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeMismatch(f"maxpool2d: window {window} does not fit input {x.shape}")
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dx = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices((n, c, ho, wo))
        rows = hi * sh + arg // kw
        cols = wi * sw + arg % kw
        np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return make_op(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")


class MaxPool2d(Layer):
    def __init__(self, window, stride=None):
        self.window = window
        self.stride = stride

    def params(self):
        return {}

    def forward(self, x):
        return maxpool2d(x, self.window, self.stride)


# ---------------------------------------------------------------------------
# linear


class Linear(Layer):
    def __init__(self, in_features, out_features, *, rng, dtype=np.float32, zero_init=False):
        if zero_init:
            self.weight = Tensor(np.zeros((in_features, out_features), dtype=dtype), requires_grad=True)
        else:
            self.weight = kaiming_uniform(rng, (in_features, out_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.data.ndim == 2:
            return T.add_bias(T.matmul(x, self.weight), self.bias)
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, x.shape[-1]))
        out = T.add_bias(T.matmul(flat, self.weight), self.bias)
        return T.reshape(out, lead + (self.weight.shape[1],))


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, mean, var, eps: float) -> Tensor:
    """Normalize NCHW input with the given per-channel stats.

    When ``mean``/``var`` are the batch moments of ``x`` itself (training
    mode) the backward pass uses the full batch-stat jacobian; frozen stats
    (eval mode) are handled by the caller passing ``frozen=True`` stats via
    batchnorm2d_frozen.
    """
    n, c, h, w = x.shape
    m = mean.reshape(1, c, 1, 1)
    v = var.reshape(1, c, 1, 1)
    istd = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m) * istd
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    cnt = n * h * w

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = istd / cnt * (cnt * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), bwd, "batchnorm2d")


def batchnorm2d_frozen(x: Tensor, gamma: Tensor, beta: Tensor, mean, var, eps: float) -> Tensor:
    c = x.shape[1]
    istd = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1)
    m = mean.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * (x.data - m) * istd + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * (x.data - m) * istd).sum(axis=(0, 2, 3))
        dx = g * gamma.data.reshape(1, c, 1, 1) * istd
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), bwd, "batchnorm2d_frozen")


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, bufs):
        self.running_mean = bufs["running_mean"].copy()
        self.running_var = bufs["running_var"].copy()

    def forward(self, x):
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeMismatch(f"batchnorm: {x.shape[1]} channels vs {self.gamma.shape[0]} params")
        if self.training:
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean.astype(
                self.running_mean.dtype
            )
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var.astype(
                self.running_var.dtype
            )
            return batchnorm2d(x, self.gamma, self.beta, mean, var, self.eps)
        return batchnorm2d_frozen(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)


# ---------------------------------------------------------------------------
# recurrent layers


class LstmDirection:
    """Single-direction LSTM; gates packed as (input, forget, cell, output)."""

    def __init__(self, input_size, hidden_size, *, rng, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        self.w_x = uniform_init(rng, (input_size, 4 * hidden_size), bound, dtype)
        self.w_h = uniform_init(rng, (hidden_size, 4 * hidden_size), bound, dtype)
        bias = np.zeros(4 * hidden_size, dtype=dtype)
        bias[hidden_size : 2 * hidden_size] = 1.0  # forget gate opens at init
        self.bias = Tensor(bias, requires_grad=True)

    def params(self):
        return {"w_x": self.w_x, "w_h": self.w_h, "bias": self.bias}

    def forward(self, seq: Tensor) -> Tensor:
        t_len, n, _ = seq.shape
        hs = self.hidden_size
        dtype = seq.dtype
        h = Tensor(np.zeros((n, hs), dtype=dtype))
        c = Tensor(np.zeros((n, hs), dtype=dtype))
        outs = []
        for t in range(t_len):
            x_t = T.index(seq, t)
            z = T.add_bias(T.add(T.matmul(x_t, self.w_x), T.matmul(h, self.w_h)), self.bias)
            i = T.sigmoid(T.index(z, (slice(None), slice(0, hs))))
            f = T.sigmoid(T.index(z, (slice(None), slice(hs, 2 * hs))))
            g = T.tanh(T.index(z, (slice(None), slice(2 * hs, 3 * hs))))
            o = T.sigmoid(T.index(z, (slice(None), slice(3 * hs, 4 * hs))))
            c = T.add(T.mul(f, c), T.mul(i, g))
            h = T.mul(o, T.tanh(c))
            outs.append(h)
        return T.stack(outs, axis=0)


class BiLstm(Layer):
    """One bidirectional LSTM layer; output features are fwd || bwd (2H)."""

    def __init__(self, input_size, hidden_size, *, rng, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.fw = LstmDirection(input_size, hidden_size, rng=rng, dtype=dtype)
        self.bw = LstmDirection(input_size, hidden_size, rng=rng, dtype=dtype)

    def params(self):
        out = {}
        for tag, d in (("fw", self.fw), ("bw", self.bw)):
            for k, v in d.params().items():
                out[f"{tag}.{k}"] = v
        return out

    def forward(self, seq: Tensor) -> Tensor:
        if seq.shape[-1] != self.input_size:
            raise ShapeMismatch(f"bilstm: feature size {seq.shape[-1]} vs expected {self.input_size}")
        fwd = self.fw.forward(seq)
        bwd = T.flip0(self.bw.forward(T.flip0(seq)))
        return T.concat([fwd, bwd], axis=2)


# ---------------------------------------------------------------------------
# spatial transformer sampler


def _theta_grid(theta_n, out_hw, in_hw):
    ho, wo = out_hw
    hi, wi = in_hw
    # pixel-center normalization: pixel i sits at (2i + 1)/extent - 1, so a
    # translation past +/-1 moves every sample strictly off the image
    xs = (2.0 * np.arange(wo) + 1.0) / wo - 1.0
    ys = (2.0 * np.arange(ho) + 1.0) / ho - 1.0
    xo, yo = np.meshgrid(xs, ys)  # (ho, wo)
    a, b, tx, c, d, ty = theta_n
    sx = a * xo + b * yo + tx
    sy = c * xo + d * yo + ty
    px = ((sx + 1.0) * wi - 1.0) / 2.0
    py = ((sy + 1.0) * hi - 1.0) / 2.0
    return xo, yo, px, py


def affine_grid_sample(x: Tensor, theta: Tensor, out_hw, mode: str = "bilinear") -> Tensor:
    """Sample input images under per-item affine maps.

    ``theta`` has shape (N, 6) = (a, b, tx, c, d, ty), rows of the 2x3
    matrix taking normalized output coords (x right, y down, in [-1, 1])
    to normalized input coords. Out-of-range samples read as zero.
    Bilinear mode is differentiable w.r.t. both x and theta; nearest only
    w.r.t. x.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    n, c, hi, wi = x.shape
    if theta.data.ndim != 2 or theta.shape != (n, 6):
        raise ShapeMismatch(f"affine_grid_sample: theta {theta.shape}, expected ({n}, 6)")
    ho, wo = out_hw
    if ho < 1 or wo < 1:
        raise ShapeMismatch("affine_grid_sample: output dims must be >= 1")

    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    saved = []
    for k in range(n):
        xo, yo, px, py = _theta_grid(theta.data[k], out_hw, (hi, wi))
        if mode == "nearest":
            ix = np.rint(px).astype(np.int64)
            iy = np.rint(py).astype(np.int64)
            ok = (ix >= 0) & (ix < wi) & (iy >= 0) & (iy < hi)
            ixc = np.clip(ix, 0, wi - 1)
            iyc = np.clip(iy, 0, hi - 1)
            out[k] = x.data[k][:, iyc, ixc] * ok
            saved.append((iyc, ixc, ok))
        else:
            x0 = np.floor(px).astype(np.int64)
            y0 = np.floor(py).astype(np.int64)
            wx = (px - x0).astype(x.dtype)
            wy = (py - y0).astype(x.dtype)
            corners = []
            acc = np.zeros((c, ho, wo), dtype=x.dtype)
            for (cy, cx, cw) in (
                (y0, x0, (1 - wy) * (1 - wx)),
                (y0, x0 + 1, (1 - wy) * wx),
                (y0 + 1, x0, wy * (1 - wx)),
                (y0 + 1, x0 + 1, wy * wx),
            ):
                ok = (cx >= 0) & (cx < wi) & (cy >= 0) & (cy < hi)
                cyc = np.clip(cy, 0, hi - 1)
                cxc = np.clip(cx, 0, wi - 1)
                val = x.data[k][:, cyc, cxc] * ok
                acc += cw * val
                corners.append((cyc, cxc, ok, cw, val))
            out[k] = acc
            saved.append((xo, yo, x0, y0, wx, wy, corners))

    def bwd_nearest(g):
        dx = np.zeros_like(x.data)
        for k in range(n):
            iyc, ixc, ok = saved[k]
            gm = g[k] * ok
            for ch in range(c):
                np.add.at(dx[k, ch], (iyc, ixc), gm[ch])
        return dx, None

    def bwd_bilinear(g):
        dx = np.zeros_like(x.data)
        dtheta = np.zeros_like(theta.data)
        for k in range(n):
            xo, yo, x0, y0, wx, wy, corners = saved[k]
            gk = g[k]  # (c, ho, wo)
            v = {}
            for tag, (cyc, cxc, ok, cw, val) in zip(("00", "01", "10", "11"), corners):
                gm = gk * (cw * ok)
                for ch in range(c):
                    np.add.at(dx[k, ch], (cyc, cxc), gm[ch])
                v[tag] = val
            dval_dpx = (1 - wy) * (v["01"] - v["00"]) + wy * (v["11"] - v["10"])
            dval_dpy = (1 - wx) * (v["10"] - v["00"]) + wx * (v["11"] - v["01"])
            gpx = (gk * dval_dpx).sum(axis=0) * wi / 2.0
            gpy = (gk * dval_dpy).sum(axis=0) * hi / 2.0
            dtheta[k, 0] = (gpx * xo).sum()
            dtheta[k, 1] = (gpx * yo).sum()
            dtheta[k, 2] = gpx.sum()
            dtheta[k, 3] = (gpy * xo).sum()
            dtheta[k, 4] = (gpy * yo).sum()
            dtheta[k, 5] = gpy.sum()
        return dx, dtheta

    bwd = bwd_nearest if mode == "nearest" else bwd_bilinear
    return make_op(out, (x, theta), bwd, f"affine_grid_sample[{mode}]")


IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
