"""The numba and numpy kernel paths must agree; both are checked against loop oracles elsewhere."""
import numpy as np
import pytest

from ear3d import _accel, kernels, reference

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not importable")


def _both(fn, *args):
    out = {}
    for name in ("numba", "numpy"):
        prev = _accel.set_backend(name)
        try:
            out[name] = fn(*args)
        finally:
            _accel.set_backend(prev)
    return out["numba"], out["numpy"]


@pytest.mark.parametrize("stride", [(1, 1, 1), (1, 2, 2), (2, 1, 2)])
def test_conv_backends_agree(rng, stride):
    xp = rng.standard_normal((2, 3, 5, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    out_shape = tuple((xp.shape[2 + i] - 3) // stride[i] + 1 for i in range(3))
    a, b = _both(kernels.conv_forward, xp, w, stride, out_shape)
    assert np.max(np.abs(a - b)) < 1e-12
    g = rng.standard_normal(a.shape)
    (dxa, dwa), (dxb, dwb) = _both(kernels.conv_backward, g, xp, w, stride, out_shape)
    assert np.max(np.abs(dxa - dxb)) < 1e-12
    assert np.max(np.abs(dwa - dwb)) < 1e-11


def test_conv_forward_matches_loop_oracle(rng):
    xp = rng.standard_normal((1, 2, 3, 4, 5))
    w = rng.standard_normal((2, 2, 1, 3, 3))
    got, _ = _both(kernels.conv_forward, xp, w, (1, 1, 1), (3, 2, 3))
    assert np.max(np.abs(got - reference.conv3d_ref(xp, w))) < 1e-12


def test_im2col_col2im_adjoint(rng):
    xp = rng.standard_normal((1, 2, 3, 4, 4))
    kernel, stride, out_shape = (3, 3, 3), (1, 1, 1), (1, 2, 2)
    cols_a, cols_b = _both(kernels.im2col, xp, kernel, stride, out_shape)
    assert np.array_equal(cols_a, cols_b)
    y = rng.standard_normal(cols_a.shape)
    back_a, back_b = _both(kernels.col2im, y, xp.shape, kernel, stride, out_shape)
    assert np.max(np.abs(back_a - back_b)) < 1e-12
    # <im2col(x), y> == <x, col2im(y)>
    assert abs(np.sum(cols_a * y) - np.sum(xp * back_a)) < 1e-10


def test_maxpool_backends_agree(rng):
    x = rng.standard_normal((1, 2, 3, 4, 6))
    (oa, arga), (ob, argb) = _both(kernels.maxpool_forward, x, (1, 2, 2))
    assert np.array_equal(oa, ob) and np.array_equal(arga, argb)
    g = rng.standard_normal(oa.shape)
    da, db = _both(kernels.maxpool_backward, g, arga, x.shape, (1, 2, 2))
    assert np.array_equal(da, db)


def test_maxpool_ties_go_to_first_element():
    x = np.ones((1, 1, 1, 2, 4))
    for name in ("numba", "numpy"):
        prev = _accel.set_backend(name)
        try:
            out, arg = kernels.maxpool_forward(x, (1, 2, 2))
            grad = kernels.maxpool_backward(np.ones(out.shape), arg, x.shape, (1, 2, 2))
        finally:
            _accel.set_backend(prev)
        expected = np.zeros_like(x)
        expected[0, 0, 0, 0, 0] = expected[0, 0, 0, 0, 2] = 1
        assert np.array_equal(grad, expected), name


def _same_partition(a, b):
    pairs = set(zip(a.ravel().tolist(), b.ravel().tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


@pytest.mark.parametrize("seed", range(5))
def test_labelling_backends_and_flood_fill_agree(seed):
    img = np.random.default_rng(seed).random((12, 15)) < 0.45
    (la, na), (lb, nb) = _both(kernels.label4, img)
    lr, nr = reference.components_ref(img)
    assert na == nb == nr
    assert _same_partition(la, lr) and _same_partition(lb, lr)


@pytest.mark.parametrize("length", [1, 3, 5, 9, 16])
def test_attention_backward_backends_agree(rng, length):
    q, k, v = (rng.standard_normal((2, length, 3)) for _ in range(3))
    out, probs = kernels.attention_forward(q, k, v)
    g = rng.standard_normal(out.shape)
    a = kernels.attention_backward_numba(g, q, k, v, probs)
    b = kernels.attention_backward_numpy(g, q, k, v, probs)
    for x, y in zip(a, b):
        assert np.max(np.abs(x - y)) < 1e-12


def test_attention_forward_matches_oracle(rng):
    q, k, v = (rng.standard_normal((2, 7, 3)) for _ in range(3))
    out, probs = kernels.attention_forward(q, k, v, block_rows=3)
    ref_out, ref_probs = reference.attention_ref(q, k, v)
    assert np.max(np.abs(out - ref_out)) < 1e-12
    assert np.max(np.abs(probs - ref_probs)) < 1e-12


def test_backend_switch_validates():
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")
    assert _accel.backend() in ("numba", "numpy")
