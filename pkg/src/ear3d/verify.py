"""The ``verify`` suite: gradient checks, oracle equivalence and invariants.

Every check yields a :class:`CheckResult` carrying the measured error and the
tolerance it was held to; nothing raises on failure.
"""
from __future__ import annotations

import contextlib
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import kernels, layers, network, objectives, reference, tensor as T
from .data import generate_phantom, load_record, make_split, save_record
from .gradcheck import grad_check
from .velocity import postprocess_mask

OP_TOL = 1e-6
CONV_TOL = 1e-5
NET_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{flag} {self.name:<34} err {self.measured:.3e}  tol {self.tolerance:.0e}{extra}"


def _t(rng, shape, positive=False, grad=True):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return T.Tensor(data, requires_grad=grad)


def _gc(name, fn, inputs, tol, params=(), max_points=None):
    rep = grad_check(fn, inputs, tolerance=tol, params=params, max_points=max_points, name=name)
    return CheckResult(f"grad/{name}", rep.max_rel_error, tol, rep.passed, f"{rep.points} points")


def gradient_checks(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    a, b = (3, 4), (3, 4)
    for name, fn in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        out.append(_gc(name, fn, [a, b], OP_TOL))
    out.append(_gc("div", T.div, [_t(rng, a), _t(rng, b, positive=True)], OP_TOL))
    out.append(_gc("neg", T.neg, [a], OP_TOL))
    out.append(_gc("scale", lambda x: T.scale(x, -2.5), [a], OP_TOL))
    out.append(_gc("relu", T.relu, [a], OP_TOL))
    out.append(_gc("sigmoid", T.sigmoid, [a], OP_TOL))
    out.append(_gc("tanh", T.tanh, [a], OP_TOL))
    out.append(_gc("exp", T.exp, [a], OP_TOL))
    out.append(_gc("log", T.log, [_t(rng, a, positive=True)], OP_TOL))
    out.append(_gc("clamp_min", lambda x: T.clamp_min(x, 0.1), [a], OP_TOL))
    out.append(_gc("matmul", T.matmul, [(3, 5), (5, 2)], OP_TOL))
    out.append(_gc("matmul_batched", T.matmul_batched, [(2, 3, 4), (2, 4, 5)], OP_TOL))
    out.append(_gc("add_bias", lambda x, y: T.add_bias(x, y, axis=1), [(2, 3, 4), (3,)], OP_TOL))
    out.append(_gc("softmax", lambda x: T.softmax(x, axis=1), [(2, 5, 3)], OP_TOL))
    out.append(_gc("reduce_sum", lambda x: T.reduce_sum(x, (0, 2)), [(2, 3, 4)], OP_TOL))
    out.append(_gc("reduce_mean", lambda x: T.reduce_mean(x, 1, keepdims=True), [(2, 3, 4)], OP_TOL))
    out.append(_gc("reshape", lambda x: T.reshape(x, (4, 6)), [(2, 3, 4)], OP_TOL))
    out.append(_gc("permute", lambda x: T.permute(x, (2, 0, 1)), [(2, 3, 4)], OP_TOL))
    out.append(_gc("concat", lambda x, y: T.concat([x, y], axis=1), [(2, 3), (2, 4)], OP_TOL))
    out.append(_gc("slice", lambda x: T.slice_(x, (slice(None), (1, 3))), [(2, 4, 3)], OP_TOL))

    w = _t(rng, (3, 2, 3, 3, 3))
    bias = _t(rng, (3,))
    out.append(_gc("conv3d", lambda x: layers.conv3d(x, w, bias, 1, 1), [(1, 2, 3, 4, 5)], CONV_TOL,
                   params=(w, bias)))
    w2 = _t(rng, (2, 2, 1, 2, 2))
    out.append(_gc("conv3d_stride2", lambda x: layers.conv3d(x, w2, None, (1, 2, 2), 0),
                   [(1, 2, 2, 4, 4)], CONV_TOL, params=(w2,)))
    out.append(_gc("maxpool3d", lambda x: layers.maxpool3d(x, (1, 2, 2)), [(1, 2, 2, 4, 4)], CONV_TOL))
    out.append(_gc("upsample_nearest", lambda x: layers.upsample_nearest(x, (1, 2, 2)),
                   [(1, 2, 2, 2, 3)], CONV_TOL))
    out.append(_gc("avgpool_spatial", lambda x: layers.avgpool_spatial(x, 2), [(1, 2, 2, 4, 4)], CONV_TOL))
    gamma, beta = _t(rng, (3,)), _t(rng, (3,))
    out.append(_gc("instance_norm", lambda x: layers.instance_norm(x, gamma, beta),
                   [(1, 3, 2, 3, 3)], OP_TOL, params=(gamma, beta)))

    cell = layers.LSTMCell(3, 4, rng=rng, dtype=np.float64)
    out.append(_gc("lstm_step", lambda x, h, c: T.concat(list(layers.lstm_step(cell, x, h, c)), axis=1),
                   [(2, 3), (2, 4), (2, 4)], OP_TOL, params=cell.parameters()))
    out.append(_gc("lstm_sequence", lambda xs: layers.lstm_sequence(cell, xs), [(2, 4, 3)], OP_TOL,
                   params=cell.parameters()))
    out.append(_gc("attention", network.attention, [(2, 5, 3)] * 3, OP_TOL))
    block = network.AttentionBlock(3, rng=rng, dtype=np.float64)
    out.append(_gc("attention_block", lambda f: network.attention_forward(block, f), [(1, 3, 2, 2, 3)],
                   OP_TOL, params=block.parameters()))
    tblock = network.TemporalLSTMBlock(3, rng=rng, dtype=np.float64)
    out.append(_gc("temporal_lstm", lambda x: network.temporal_forward(tblock, x), [(1, 3, 4, 2, 2)],
                   OP_TOL, params=tblock.parameters()))

    probs = T.Tensor(rng.uniform(0.05, 0.95, (2, 2, 2, 3, 3)), requires_grad=True)
    target = objectives.one_hot(rng.integers(0, 2, (2, 2, 3, 3)), 2, np.float64)
    out.append(_gc("cross_entropy", lambda p: objectives.cross_entropy(p, target), [probs], OP_TOL))
    soft = T.Tensor(rng.uniform(0, 1, (2, 3, 4, 4)), requires_grad=True)
    gt = rng.integers(0, 2, (2, 3, 4, 4)).astype(np.float64)
    out.append(_gc("dice_loss", lambda p: objectives.dice_loss(p, gt), [soft], OP_TOL))
    out.append(_gc("jaccard_term", lambda p: objectives.jaccard_term(p, gt), [soft], OP_TOL))
    out.append(_gc("dice_iou_loss", lambda p: objectives.dice_iou_loss(p, gt), [soft], OP_TOL))

    out.append(network_grad_check(seed))
    return out


def network_grad_check(seed: int = 0, max_points: int = 6) -> CheckResult:
    """Depth-2 3D-EAR (attention and LSTM on) in float64, checked through the softmax output."""
    cfg = network.EARConfig(depth=2, base_channels=2, use_attention=True, use_lstm=True)
    net = network.build_network(cfg, seed=seed, dtype=np.float64)
    x = T.Tensor(np.random.default_rng(seed + 1).standard_normal((1, 4, 3, 4, 4)), requires_grad=True)
    return _gc("network_depth2", lambda inp: net(inp), [x], NET_TOL, params=net.parameters(),
               max_points=max_points)


def _worst(pairs) -> float:
    return max(float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
               for a, b in pairs)


def oracle_checks(seed: int = 0, instances: int = 10) -> list:
    rng = np.random.default_rng(seed)
    rows = {k: [] for k in ("conv3d", "matmul", "softmax", "lstm_step", "lstm_sequence",
                            "attention_block", "cross_entropy", "dice_loss", "jaccard_term",
                            "dice_iou_loss")}
    for _ in range(instances):
        ci, co = rng.integers(1, 3, size=2)
        x = rng.standard_normal((1, ci, 3, 4, 4))
        w = rng.standard_normal((co, ci, 3, 3, 3))
        bias = rng.standard_normal(co)
        stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
        got = layers.conv3d(T.Tensor(x), T.Tensor(w), T.Tensor(bias), stride, 1).data
        rows["conv3d"].append((got, reference.conv3d_ref(x, w, bias, stride, (1, 1, 1))))

        a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))
        rows["matmul"].append((T.matmul(T.Tensor(a), T.Tensor(b)).data, reference.matmul_ref(a, b)))
        s = rng.standard_normal((3, 5)) * 4
        rows["softmax"].append((T.softmax(T.Tensor(s), axis=1).data, reference.softmax_ref(s, 1)))

        cell = layers.LSTMCell(3, 4, rng=rng, dtype=np.float64)
        ws = [p.data for p in (cell.W_ih, cell.W_hh, cell.b_ih, cell.b_hh)]
        xt, h, c = rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        hn, cn = layers.lstm_step(cell, T.Tensor(xt), T.Tensor(h), T.Tensor(c))
        hr, cr = reference.lstm_step_ref(xt, h, c, *ws)
        rows["lstm_step"].append((np.concatenate([hn.data, cn.data]), np.concatenate([hr, cr])))
        xs = rng.standard_normal((2, 5, 3))
        rows["lstm_sequence"].append((layers.lstm_sequence(cell, T.Tensor(xs)).data,
                                      reference.lstm_sequence_ref(xs, *ws)))

        block = network.AttentionBlock(3, rng=rng, dtype=np.float64)
        f = rng.standard_normal((1, 3, 2, 3, 3))
        ref = reference.attention_block_ref(f, block.conv_key.weight.data, block.conv_key.bias.data,
                                            block.conv_value.weight.data, block.conv_value.bias.data)
        rows["attention_block"].append((network.attention_forward(block, T.Tensor(f)).data, ref))

        p = rng.uniform(0.01, 1, (2, 2, 2, 3, 3))
        p /= p.sum(axis=1, keepdims=True)
        y = objectives.one_hot(rng.integers(0, 2, (2, 2, 3, 3)), 2, np.float64)
        rows["cross_entropy"].append((objectives.cross_entropy(T.Tensor(p), y).item(),
                                      reference.cross_entropy_ref(p, y)))
        soft = rng.uniform(0, 1, (2, 3, 4, 4))
        gt = rng.integers(0, 2, (2, 3, 4, 4)).astype(np.float64)
        rows["dice_loss"].append((objectives.dice_loss(T.Tensor(soft), gt).item(),
                                  reference.dice_ref(soft, gt)))
        rows["jaccard_term"].append((objectives.jaccard_term(T.Tensor(soft), gt).item(),
                                     reference.jaccard_ref(soft, gt)))
        rows["dice_iou_loss"].append((objectives.dice_iou_loss(T.Tensor(soft), gt).item(),
                                      reference.dice_iou_ref(soft, gt)))
    out = []
    for name, pairs in rows.items():
        err = _worst(pairs)
        out.append(CheckResult(f"oracle/{name}", err, ORACLE_TOL, err < ORACLE_TOL,
                               f"{len(pairs)} instances"))
    return out


def attention_row_sums(seed: int = 0, trials: int = 20) -> float:
    """Largest |row sum - 1| over the attention maps of ``trials`` random float32 inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 5))
        block = network.AttentionBlock(c, rng=rng, dtype=np.float32)
        f = T.Tensor((rng.standard_normal((1, c, 2, 4, 4)) * rng.uniform(0.1, 10)).astype(np.float32))
        maps = network.attention_maps(block, f)
        worst = max(worst, float(np.max(np.abs(maps.astype(np.float64).sum(axis=-1) - 1.0))))
    return worst


def lstm_causality(seed: int = 0) -> bool:
    """Perturbing frame t+1 must leave the temporal block's frames <= t bitwise unchanged."""
    rng = np.random.default_rng(seed)
    block = network.TemporalLSTMBlock(3, rng=rng, dtype=np.float32)
    x = rng.standard_normal((1, 3, 6, 2, 2)).astype(np.float32)
    base = network.temporal_forward(block, T.Tensor(x)).data
    for t in range(5):
        y = x.copy()
        y[:, :, t + 1] += rng.standard_normal(y[:, :, t + 1].shape).astype(np.float32)
        out = network.temporal_forward(block, T.Tensor(y)).data
        if not np.array_equal(out[:, :, : t + 1], base[:, :, : t + 1]):
            return False
    return True


def invariant_checks(seed: int = 0) -> list:
    out = []
    dev = attention_row_sums(seed)
    out.append(CheckResult("invariant/attention_row_stochastic", dev, 1e-5, dev < 1e-5, "20 inputs"))
    causal = lstm_causality(seed)
    out.append(CheckResult("invariant/lstm_causal", 0.0 if causal else 1.0, 0.0, causal, "bitwise"))

    rec = generate_phantom(1, 3, 16, 16, seed=seed)[0]
    noisy = rec.mask.copy()
    noisy[:, 0, 0:2] = 1
    once = postprocess_mask(noisy)
    idem = np.array_equal(postprocess_mask(once), once) and np.array_equal(once, rec.mask)
    out.append(CheckResult("invariant/postprocess_idempotent", 0.0 if idem else 1.0, 0.0, idem,
                           "speck removed, annulus kept"))

    with tempfile.TemporaryDirectory() as tmp:
        save_record(rec, tmp + "/r")
        back = load_record(tmp + "/r")
    same = back.image.tobytes() == rec.image.tobytes() and back.mask.tobytes() == rec.mask.tobytes()
    out.append(CheckResult("invariant/container_roundtrip", 0.0 if same else 1.0, 0.0, same, "bitwise"))

    plan = make_split([f"s{i:02d}" for i in range(18)], 0.2, 5, seed=seed)
    folds = [s for f in plan.folds for s in f]
    ok = (len(plan.test_subjects) == 4 and not set(plan.test_subjects) & set(plan.train_subjects)
          and sorted(folds) == sorted(plan.train_subjects))
    out.append(CheckResult("invariant/subject_split", 0.0 if ok else 1.0, 0.0, ok, "18 -> 4 test"))

    gt = np.zeros((4, 4))
    gt[0] = 1
    pred = np.zeros((4, 4))
    pred[3] = 1
    vals = [objectives.dice_loss(T.Tensor(pred), gt).item(), objectives.jaccard_term(T.Tensor(pred), gt).item(),
            objectives.dice_iou_loss(T.Tensor(pred[None]), gt[None]).item(),
            objectives.dice_loss(T.Tensor(gt), gt).item(), objectives.jaccard_term(T.Tensor(gt), gt).item()]
    err = max(abs(v - e) for v, e in zip(vals, (8 / 9, 8 / 9, 64 / 81, 0.0, 0.0)))
    out.append(CheckResult("invariant/loss_fixed_points", err, 1e-12, err < 1e-12, "8/9, 8/9, 64/81, 0, 0"))
    return out


@contextlib.contextmanager
def corrupted_conv_backward(factor: float = 1.001):
    """Scale the conv weight gradient by ``factor``; the harness must notice."""
    original = kernels.conv_backward

    def broken(*args, **kwargs):
        dxp, dw = original(*args, **kwargs)
        return dxp, None if dw is None else dw * factor

    kernels.conv_backward = broken
    try:
        yield
    finally:
        kernels.conv_backward = original


def run_verify(seed: int = 0, corrupt_conv: bool = False) -> list:
    ctx = corrupted_conv_backward() if corrupt_conv else contextlib.nullcontext()
    with ctx:
        return gradient_checks(seed) + oracle_checks(seed) + invariant_checks(seed)


def format_report(results, elapsed: float | None = None) -> str:
    lines = [r.line() for r in results]
    failed = [r.name for r in results if not r.passed]
    tail = f"{len(results) - len(failed)}/{len(results)} checks passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f} s"
    lines.append(tail)
    if failed:
        lines.append("failed: " + ", ".join(failed))
    return "\n".join(lines) + "\n"


def main(seed: int = 0, corrupt_conv: bool = False) -> tuple:
    start = time.perf_counter()
    results = run_verify(seed, corrupt_conv)
    return results, format_report(results, time.perf_counter() - start)
