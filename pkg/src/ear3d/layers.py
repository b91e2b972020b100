"""Layers used by the segmentor: 3D conv, pooling, upsampling, instance norm, LSTM."""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import (Tensor, add_bias, concat, make_result, matmul, mul, permute,
                     reshape, sigmoid, slice_, tanh, add)


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


class Module:
    """Minimal parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter in place (used to run checks in float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_shape(in_shape, kernel, stride, padding) -> tuple:
    out = []
    for n, k, s, p in zip(in_shape, kernel, stride, padding):
        if n + 2 * p < k:
            raise ShapeError(f"padded extent {n + 2 * p} smaller than kernel {k}")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x[N,C_in,T,H,W]`` with ``weight[C_out,C_in,kt,kh,kw]``."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input and weight, got {x.shape}, {weight.shape}")
    n, cin = x.shape[:2]
    cout, wcin = weight.shape[:2]
    if cin != wcin:
        raise ShapeError(f"input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    kernel = weight.shape[2:]
    out_sp = conv_output_shape(x.shape[2:], kernel, stride, padding)
    pt, ph, pw = padding
    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out = kernels.conv_forward(xp, weight.data, stride, out_sp)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)
    in_sp = x.shape[2:]

    def bwd(g):
        gxp, gw = kernels.conv_backward(g, xp, weight.data, stride, out_sp,
                                        need_dx=x.requires_grad, need_dw=weight.requires_grad)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pt:pt + in_sp[0], ph:ph + in_sp[1], pw:pw + in_sp[2]]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("conv3d", out, parents, bwd)


class Conv3dLayer(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=None,
                 rng=None, dtype=np.float32):
        kernel = _triple(kernel)
        if padding is None:
            padding = tuple(k // 2 for k in kernel)
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * int(np.prod(kernel))
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels) + kernel)
        self.weight = Tensor(w, dtype=dtype, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), dtype=dtype, requires_grad=True)

    @property
    def kernel(self):
        return self.weight.shape[2:]

    def output_shape(self, in_shape):
        n, c = in_shape[:2]
        if c != self.weight.shape[1]:
            raise ShapeError(f"input has {c} channels, layer expects {self.weight.shape[1]}")
        return (n, self.weight.shape[0]) + conv_output_shape(in_shape[2:], self.kernel,
                                                             self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

def maxpool3d(x: Tensor, window=(1, 2, 2)) -> Tensor:
    window = _triple(window)
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects [N,C,T,H,W], got {x.shape}")
    for extent, w in zip(x.shape[2:], window):
        if extent % w:
            raise ShapeError(f"extent {extent} not divisible by pooling window {w}")
    out, arg = kernels.maxpool_forward(x.data, window)
    in_shape = x.shape
    return make_result("maxpool3d", out, (x,),
                       lambda g: (kernels.maxpool_backward(g, arg, in_shape, window),))


def upsample_nearest(x: Tensor, factor=(1, 2, 2)) -> Tensor:
    factor = _triple(factor)
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest expects [N,C,T,H,W], got {x.shape}")
    ft, fh, fw = factor
    out = x.data
    for axis, f in zip((2, 3, 4), factor):
        if f != 1:
            out = np.repeat(out, f, axis=axis)
    n, c, t, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, t, ft, h, fh, w, fw).sum(axis=(3, 5, 7)),)

    return make_result("upsample_nearest", np.ascontiguousarray(out), (x,), bwd)


def avgpool_spatial(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` spatial blocks."""
    n, c, t, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial extents {(h, w)} not divisible by {factor}")
    blocks = reshape(x, (n, c, t, h // factor, factor, w // factor, factor))
    return blocks.mean(axes=(4, 6))


# ---------------------------------------------------------------------------
# instance normalisation over (H, W) per sample, channel and frame
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 5 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"instance_norm shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    m = xd.shape[3] * xd.shape[4]
    mean = xd.mean(axis=(3, 4), keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=(3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv_std
    gv = gamma.data.reshape(1, -1, 1, 1, 1)
    out = xhat * gv + beta.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3, 4))
        dbeta = g.sum(axis=(0, 2, 3, 4))
        dxhat = g * gv
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=(3, 4), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(3, 4), keepdims=True))
        return dx, dgamma, dbeta

    return make_result("instance_norm", out, (x, gamma, beta), bwd)


class NormLayer(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.scale = Tensor(np.ones(channels), dtype=dtype, requires_grad=True)
        self.shift = Tensor(np.zeros(channels), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.scale, self.shift, self.eps)


# ---------------------------------------------------------------------------
# LSTM; gate order (input, forget, cell, output)
# ---------------------------------------------------------------------------

class LSTMCell(Module):
    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_size = input_size
        self.hidden_size = hidden_size
        h4 = 4 * hidden_size
        bi, bh = 1.0 / math.sqrt(input_size), 1.0 / math.sqrt(hidden_size)
        self.W_ih = Tensor(rng.uniform(-bi, bi, (h4, input_size)), dtype=dtype, requires_grad=True)
        self.W_hh = Tensor(rng.uniform(-bh, bh, (h4, hidden_size)), dtype=dtype, requires_grad=True)
        self.b_ih = Tensor(rng.uniform(-bh, bh, h4), dtype=dtype, requires_grad=True)
        self.b_hh = Tensor(rng.uniform(-bh, bh, h4), dtype=dtype, requires_grad=True)

    def zero_state(self, batch, dtype=None):
        dtype = self.W_ih.dtype if dtype is None else dtype
        z = np.zeros((batch, self.hidden_size), dtype=dtype)
        return Tensor(z), Tensor(z.copy())


def lstm_step(cell: LSTMCell, x_t: Tensor, h: Tensor, c: Tensor):
    """One recurrence step; returns ``(h_next, c_next)``."""
    b = x_t.shape[0]
    hs = cell.hidden_size
    if x_t.ndim != 2 or x_t.shape[1] != cell.input_size:
        raise ShapeError(f"x_t must be [B,{cell.input_size}], got {x_t.shape}")
    if h.shape != (b, hs) or c.shape != (b, hs):
        raise ShapeError(f"state must be [{b},{hs}], got {h.shape} and {c.shape}")
    gates = add(add_bias(matmul(x_t, permute(cell.W_ih, (1, 0))), cell.b_ih),
                add_bias(matmul(h, permute(cell.W_hh, (1, 0))), cell.b_hh))
    i = sigmoid(slice_(gates, (slice(None), (0, hs))))
    f = sigmoid(slice_(gates, (slice(None), (hs, 2 * hs))))
    g = tanh(slice_(gates, (slice(None), (2 * hs, 3 * hs))))
    o = sigmoid(slice_(gates, (slice(None), (3 * hs, 4 * hs))))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def lstm_sequence(cell: LSTMCell, xs: Tensor, h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
    """Run ``xs[B,T,C]`` through the cell; returns all hidden states ``[B,T,H]``."""
    if xs.ndim != 3 or xs.shape[2] != cell.input_size:
        raise ShapeError(f"xs must be [B,T,{cell.input_size}], got {xs.shape}")
    b, t, _ = xs.shape
    if t < 1:
        raise ShapeError("sequence length must be at least 1")
    zh, zc = cell.zero_state(b, xs.dtype)
    h = zh if h0 is None else h0
    c = zc if c0 is None else c0
    outs = []
    for step in range(t):
        x_t = reshape(slice_(xs, (slice(None), (step, step + 1))), (b, cell.input_size))
        h, c = lstm_step(cell, x_t, h, c)
        outs.append(reshape(h, (b, 1, cell.hidden_size)))
    return outs[0] if t == 1 else concat(outs, axis=1)
