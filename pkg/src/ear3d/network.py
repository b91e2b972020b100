"""The 3D-EAR segmentor and its two ablation baselines.

A U-shaped encoder/decoder over ``[N, C, T, H, W]`` volumes.  Pooling and
upsampling touch only the spatial axes, so every stage keeps all T frames.
Optional pieces:

* per-frame self-attention on every skip tensor (:class:`AttentionBlock`),
* an LSTM over the frame axis at the bottleneck (:class:`TemporalLSTMBlock`).

Both off gives a plain UNet3D, attention only gives UNet3D-Attention.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .layers import (Conv3dLayer, LSTMCell, Module, NormLayer, avgpool_spatial, lstm_sequence,
                     maxpool3d, upsample_nearest)
from .tensor import Tensor, concat, make_result, permute, relu, reshape, softmax


@dataclass
class EARConfig:
    depth: int = 4
    base_channels: int = 8
    in_channels: int = 4
    out_classes: int = 2
    use_attention: bool = True
    use_lstm: bool = True
    frames: int | None = None
    kernel_t: int = 3
    # skips with more positions per frame run attention on a 2^k-pooled copy
    attention_max_positions: int = 64 * 64

    def validate(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.out_classes < 2:
            raise ConfigError("out_classes must be >= 2")
        if self.kernel_t < 1 or self.kernel_t % 2 == 0:
            raise ConfigError(f"kernel_t must be odd and positive, got {self.kernel_t}")
        if self.attention_max_positions < 1:
            raise ConfigError("attention_max_positions must be positive")
        if self.frames is not None and self.frames < 1:
            raise ConfigError("frames must be positive")
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EARConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d).validate()

    @property
    def arm(self) -> str:
        if self.use_attention and self.use_lstm:
            return "3D-EAR"
        if self.use_attention:
            return "UNet3D-Attention"
        if self.use_lstm:
            return "UNet3D-LSTM"
        return "UNet3D"


# ---------------------------------------------------------------------------
# attention-enhanced skip connection
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Batched ``softmax(q k^T) v`` with the softmax over keys; inputs ``[B, L, C]``."""
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention expects equal [B,L,C] operands, got {q.shape}, {k.shape}, {v.shape}")
    out, probs = kernels.attention_forward(q.data, k.data, v.data)
    qd, kd, vd = q.data, k.data, v.data
    return make_result("attention", out, (q, k, v),
                       lambda g: kernels.attention_backward(g, qd, kd, vd, probs))


def _frames_as_rows(x: Tensor) -> Tensor:
    n, c, t, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 4, 1)), (n * t, h * w, c))


def _rows_as_frames(rows: Tensor, shape) -> Tensor:
    n, c, t, h, w = shape
    return permute(reshape(rows, (n, t, h, w, c)), (0, 4, 1, 2, 3))


def attention_pool_factor(h: int, w: int, max_positions: int) -> int:
    factor = 1
    while (h // factor) * (w // factor) > max_positions:
        factor *= 2
        if h % factor or w % factor:
            raise ShapeError(f"cannot pool a {h}x{w} skip below {max_positions} positions")
    return factor


class AttentionBlock(Module):
    def __init__(self, channels, rng=None, dtype=np.float32):
        self.conv_key = Conv3dLayer(channels, channels, kernel=1, rng=rng, dtype=dtype)
        self.conv_value = Conv3dLayer(channels, channels, kernel=1, rng=rng, dtype=dtype)

    def __call__(self, f: Tensor, max_positions: int | None = None) -> Tensor:
        return attention_forward(self, f, max_positions)


def attention_forward(block: AttentionBlock, f: Tensor, max_positions: int | None = None) -> Tensor:
    """Per-frame self-attention; output has the shape of ``f``.

    Queries are the raw features, keys and values their two 1x1x1
    projections.  If a frame has more than ``max_positions`` pixels the block
    runs on an average-pooled copy and the result is nearest-upsampled.
    """
    if f.ndim != 5:
        raise ShapeError(f"attention_forward expects [N,C,T,H,W], got {f.shape}")
    factor = 1
    if max_positions is not None:
        factor = attention_pool_factor(f.shape[3], f.shape[4], max_positions)
    src = avgpool_spatial(f, factor) if factor > 1 else f
    q = _frames_as_rows(src)
    k = _frames_as_rows(block.conv_key(src))
    v = _frames_as_rows(block.conv_value(src))
    out = _rows_as_frames(attention(q, k, v), src.shape)
    if factor > 1:
        out = upsample_nearest(out, (1, factor, factor))
    return out


def attention_maps(block: AttentionBlock, f: Tensor) -> np.ndarray:
    """The ``[N*T, HW, HW]`` row-stochastic matrices used by :func:`attention_forward`."""
    q = _frames_as_rows(f).data
    k = _frames_as_rows(block.conv_key(f)).data
    v = _frames_as_rows(block.conv_value(f)).data
    return kernels.attention_forward(q, k, v)[1]


# ---------------------------------------------------------------------------
# bottleneck temporal LSTM
# ---------------------------------------------------------------------------

class TemporalLSTMBlock(Module):
    def __init__(self, channels, rng=None, dtype=np.float32):
        self.cell = LSTMCell(channels, channels, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return temporal_forward(self, x)


def temporal_forward(block: TemporalLSTMBlock, x: Tensor, bypass: bool = False) -> Tensor:
    """Each spatial position becomes a length-T sequence of C-vectors.

    ``bypass`` skips the LSTM and returns the reshape round trip alone.
    """
    if x.ndim != 5:
        raise ShapeError(f"temporal_forward expects [N,C,T,H,W], got {x.shape}")
    n, c, t, h, w = x.shape
    if c != block.cell.input_size:
        raise ShapeError(f"input has {c} channels, LSTM expects {block.cell.input_size}")
    seqs = reshape(permute(x, (0, 3, 4, 2, 1)), (n * h * w, t, c))
    if not bypass:
        seqs = lstm_sequence(block.cell, seqs)
    return permute(reshape(seqs, (n, h, w, t, c)), (0, 4, 3, 1, 2))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class ConvBlock(Module):
    """Two rounds of conv -> instance norm -> ReLU."""

    def __init__(self, cin, cout, kernel, rng, dtype):
        self.conv1 = Conv3dLayer(cin, cout, kernel, rng=rng, dtype=dtype)
        self.norm1 = NormLayer(cout, dtype=dtype)
        self.conv2 = Conv3dLayer(cout, cout, kernel, rng=rng, dtype=dtype)
        self.norm2 = NormLayer(cout, dtype=dtype)

    def output_shape(self, shape):
        return self.conv2.output_shape(self.conv1.output_shape(shape))

    def __call__(self, x):
        x = relu(self.norm1(self.conv1(x)))
        return relu(self.norm2(self.conv2(x)))


class Network(Module):
    def __init__(self, cfg: EARConfig, rng, dtype=np.float32):
        self._cfg = cfg
        k = (cfg.kernel_t, 3, 3)
        self.encoder = [ConvBlock(cfg.in_channels if lvl == 0 else cfg.channels(lvl - 1),
                                  cfg.channels(lvl), k, rng, dtype) for lvl in range(cfg.depth)]
        bottom = cfg.channels(cfg.depth - 1)
        self.temporal = TemporalLSTMBlock(bottom, rng=rng, dtype=dtype) if cfg.use_lstm else None
        levels = list(range(cfg.depth - 2, -1, -1))
        self.up_convs = [Conv3dLayer(cfg.channels(lvl + 1), cfg.channels(lvl), k, rng=rng, dtype=dtype)
                         for lvl in levels]
        self.attention = ([AttentionBlock(cfg.channels(lvl), rng=rng, dtype=dtype) for lvl in levels]
                          if cfg.use_attention else [])
        self.decoder = [ConvBlock(2 * cfg.channels(lvl), cfg.channels(lvl), k, rng, dtype)
                        for lvl in levels]
        self.head = Conv3dLayer(cfg.channels(0), cfg.out_classes, kernel=1, rng=rng, dtype=dtype)

    @property
    def config(self) -> EARConfig:
        return self._cfg

    @property
    def dtype(self):
        return self.head.weight.dtype

    def _check_input(self, shape):
        cfg = self._cfg
        if len(shape) != 5:
            raise ShapeError(f"network input must be [N,C,T,H,W], got {shape}")
        if shape[1] != cfg.in_channels:
            raise ShapeError(f"network expects {cfg.in_channels} input channels, got {shape[1]}")
        div = 2 ** (cfg.depth - 1)
        if shape[3] % div or shape[4] % div:
            raise ShapeError(f"H, W = {shape[3:]} must be divisible by {div} at depth {cfg.depth}")

    def output_shape(self, input_shape) -> tuple:
        """Shape-only dry run through the layer shape formulas."""
        input_shape = tuple(int(s) for s in input_shape)
        self._check_input(input_shape)
        shape = input_shape
        skips = []
        for lvl, block in enumerate(self.encoder):
            shape = block.output_shape(shape)
            if lvl < len(self.encoder) - 1:
                skips.append(shape)
                n, c, t, h, w = shape
                shape = (n, c, t, h // 2, w // 2)
        for up, dec in zip(self.up_convs, self.decoder):
            n, c, t, h, w = shape
            shape = up.output_shape((n, c, t, 2 * h, 2 * w))
            skip = skips.pop()
            if shape[2:] != skip[2:]:
                raise ShapeError(f"decoder extent {shape} does not meet skip {skip}")
            shape = dec.output_shape((shape[0], shape[1] + skip[1]) + shape[2:])
        return self.head.output_shape(shape)

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


def forward(net: Network, x: Tensor) -> Tensor:
    """Per-pixel class probabilities ``[N, K, T, H, W]``."""
    cfg = net.config
    net._check_input(x.shape)
    skips = []
    for lvl, block in enumerate(net.encoder):
        x = block(x)
        if lvl < cfg.depth - 1:
            skips.append(x)
            x = maxpool3d(x, (1, 2, 2))
    if net.temporal is not None:
        x = net.temporal(x)
    for i, (up, dec) in enumerate(zip(net.up_convs, net.decoder)):
        x = up(upsample_nearest(x, (1, 2, 2)))
        skip = skips.pop()
        if net.attention:
            skip = net.attention[i](skip, cfg.attention_max_positions)
        x = dec(concat([x, skip], axis=1))
    return softmax(net.head(x), axis=1)


def build_network(cfg: EARConfig, seed: int = 0, dtype=np.float32) -> Network:
    cfg.validate()
    return Network(cfg, np.random.default_rng(seed), dtype=dtype)


def attention_param_count(channels: int) -> int:
    return 2 * channels * channels + 2 * channels


def lstm_param_count(input_size: int, hidden: int) -> int:
    return 4 * hidden * (input_size + hidden) + 8 * hidden
