import dataclasses

import numpy as np
import pytest

from ear3d import reference
from ear3d.errors import ConfigError, ShapeError
from ear3d.gradcheck import grad_check
from ear3d.layers import lstm_sequence
from ear3d.network import (AttentionBlock, EARConfig, TemporalLSTMBlock, attention_forward,
                           attention_maps, attention_param_count, attention_pool_factor,
                           build_network, lstm_param_count, temporal_forward)
from ear3d.tensor import Tensor, backward, reduce_sum


def _block(c, seed=0, dtype=np.float64):
    return AttentionBlock(c, rng=np.random.default_rng(seed), dtype=dtype)


def test_attention_constant_features_give_uniform_map():
    block = _block(1)
    f = Tensor(np.full((1, 1, 2, 3, 3), 0.7))
    maps = attention_maps(block, f)
    assert np.max(np.abs(maps - 1 / 9)) < 1e-15
    out = attention_forward(block, f).data
    value = block.conv_value(f).data
    assert np.max(np.abs(out - value.mean(axis=(3, 4), keepdims=True))) < 1e-15


def test_attention_single_position_is_value_projection(rng):
    block = _block(3)
    f = Tensor(rng.standard_normal((1, 3, 4, 1, 1)))
    assert np.max(np.abs(attention_forward(block, f).data - block.conv_value(f).data)) < 1e-15


def test_attention_matches_explicit_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        block = _block(2, seed=int(rng.integers(1000)))
        f = rng.standard_normal((1, 2, 2, 3, 3))
        ref = reference.attention_block_ref(f, block.conv_key.weight.data, block.conv_key.bias.data,
                                            block.conv_value.weight.data, block.conv_value.bias.data)
        assert np.max(np.abs(attention_forward(block, Tensor(f)).data - ref)) < 1e-10


def test_attention_rows_are_stochastic(rng):
    for trial in range(20):
        block = _block(3, seed=trial, dtype=np.float32)
        f = Tensor((rng.standard_normal((1, 3, 2, 4, 4)) * 5).astype(np.float32))
        maps = attention_maps(block, f)
        assert maps.shape == (2, 16, 16)
        assert np.max(np.abs(maps.sum(axis=-1) - 1)) < 1e-5


def test_attention_pool_factor():
    assert attention_pool_factor(64, 64, 64 * 64) == 1
    assert attention_pool_factor(128, 128, 64 * 64) == 2
    assert attention_pool_factor(512, 512, 64 * 64) == 8
    with pytest.raises(ShapeError):
        attention_pool_factor(6, 6, 4)


def test_pooled_attention_keeps_shape(rng):
    block = _block(2)
    f = Tensor(rng.standard_normal((1, 2, 1, 8, 8)))
    assert attention_forward(block, f, max_positions=16).shape == f.shape


def test_temporal_examples(rng):
    block = TemporalLSTMBlock(3, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 3, 4, 2, 3)))
    assert temporal_forward(block, x, bypass=True).data.tobytes() == x.data.tobytes()
    # H = W = 1 is lstm_sequence over [N, T, C]
    x1 = rng.standard_normal((2, 3, 5, 1, 1))
    got = temporal_forward(block, Tensor(x1)).data
    direct = lstm_sequence(block.cell, Tensor(x1[:, :, :, 0, 0].transpose(0, 2, 1))).data
    assert np.array_equal(got[:, :, :, 0, 0], direct.transpose(0, 2, 1))
    for p in block.parameters():
        p.data[...] = 0
    assert not temporal_forward(block, x).data.any()


def test_temporal_causality(rng):
    block = TemporalLSTMBlock(2, rng=rng, dtype=np.float32)
    x = rng.standard_normal((1, 2, 5, 3, 3)).astype(np.float32)
    base = temporal_forward(block, Tensor(x)).data
    for t in range(4):
        y = x.copy()
        y[:, :, t + 1] -= 2
        out = temporal_forward(block, Tensor(y)).data
        assert out[:, :, : t + 1].tobytes() == base[:, :, : t + 1].tobytes()


def test_depth1_plain_probabilities():
    net = build_network(EARConfig(depth=1, use_attention=False, use_lstm=False), seed=0, dtype=np.float64)
    out = net(Tensor(np.random.default_rng(0).standard_normal((1, 4, 2, 8, 8))))
    assert out.shape == (1, 2, 2, 8, 8)
    assert np.max(np.abs(out.data.sum(axis=1) - 1)) < 1e-12


@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("size", [16, 32])
def test_output_extents_match_input(depth, size):
    net = build_network(EARConfig(depth=depth, base_channels=2), seed=0)
    shape = (1, 4, 3, size, size)
    assert net.output_shape(shape) == (1, 2, 3, size, size)
    if size == 16:
        out = net(Tensor(np.random.default_rng(0).standard_normal(shape).astype(np.float32)))
        assert out.shape == (1, 2, 3, size, size)
        assert np.max(np.abs(out.data.sum(axis=1) - 1)) < 1e-6


def test_full_scale_dry_run():
    net = build_network(EARConfig(depth=4, base_channels=8), seed=0)
    assert net.output_shape((1, 4, 50, 512, 512)) == (1, 2, 50, 512, 512)


def test_indivisible_extent_is_rejected():
    net = build_network(EARConfig(depth=3, base_channels=2), seed=0)
    with pytest.raises(ShapeError):
        net.output_shape((1, 4, 2, 18, 16))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 3, 2, 16, 16), np.float32)))


def test_parameter_counts_follow_block_formulas():
    base = EARConfig(depth=3, base_channels=4, use_attention=False, use_lstm=False)
    plain = build_network(base).num_parameters()
    att = build_network(dataclasses.replace(base, use_attention=True)).num_parameters()
    lstm = build_network(dataclasses.replace(base, use_lstm=True)).num_parameters()
    skip_widths = [base.channels(level) for level in range(base.depth - 1)]
    assert att - plain == sum(attention_param_count(c) for c in skip_widths)
    bottom = base.channels(base.depth - 1)
    assert lstm - plain == lstm_param_count(bottom, bottom)
    assert attention_param_count(8) == 2 * 64 + 16


def test_arms_are_strict_subnetworks():
    cfg = EARConfig(depth=2, base_channels=2, use_attention=False, use_lstm=False)
    assert cfg.arm == "UNet3D"
    net = build_network(cfg)
    assert net.temporal is None and net.attention == []
    assert dataclasses.replace(cfg, use_attention=True).arm == "UNet3D-Attention"
    assert dataclasses.replace(cfg, use_attention=True, use_lstm=True).arm == "3D-EAR"


def test_config_validation():
    with pytest.raises(ConfigError):
        build_network(EARConfig(depth=0))
    with pytest.raises(ConfigError):
        EARConfig.from_dict({"depth": 2, "widht": 3})
    with pytest.raises(ConfigError):
        EARConfig(kernel_t=2).validate()
    cfg = EARConfig(depth=2)
    assert EARConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_deterministic():
    net = build_network(EARConfig(depth=2, base_channels=2), seed=3)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 3, 8, 8)).astype(np.float32))
    assert net(x).data.tobytes() == net(x).data.tobytes()


def test_desk_scale_forward_backward_and_parameter_slice_gradcheck():
    net = build_network(EARConfig(depth=2, base_channels=4), seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4, 8, 32, 32)))
    out = net(x)
    backward(reduce_sum(out))
    assert all(p.grad is not None for p in net.parameters())
    small = Tensor(np.random.default_rng(2).standard_normal((1, 4, 2, 4, 4)))
    params = [net.attention[0].conv_key.weight, net.temporal.cell.W_hh, net.head.weight]
    rep = grad_check(lambda: net(small), [], tolerance=1e-4, params=params, max_points=5)
    assert rep.passed, str(rep)
