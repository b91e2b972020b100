import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ear3d import reference
from ear3d.errors import NumericError, ShapeError
from ear3d.gradcheck import grad_check
from ear3d.objectives import (aggregate, binarize, compute_metrics, cross_entropy, dice_iou_loss,
                              dice_loss, jaccard_term, one_hot, segmentation_loss)
from ear3d.tensor import Tensor


def _disjoint():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[0, :] = 1
    b[3, :] = 1
    return a, b


def test_perfect_match_is_exactly_zero():
    m = (np.random.default_rng(0).random((5, 5)) > 0.5).astype(float)
    assert dice_loss(Tensor(m), m).data == 0.0
    assert jaccard_term(Tensor(m), m).data == 0.0
    assert dice_iou_loss(Tensor(m[None]), m[None]).data == 0.0


def test_disjoint_fixed_points():
    a, b = _disjoint()
    # 1 - (0 + 1) / (4 + 4 + 1) for both terms
    assert dice_loss(Tensor(a), b).data == pytest.approx(8 / 9, abs=1e-15)
    assert jaccard_term(Tensor(a), b).data == pytest.approx(8 / 9, abs=1e-15)
    assert dice_iou_loss(Tensor(a[None]), b[None]).data == pytest.approx(64 / 81, abs=1e-15)


def test_empty_masks_are_defined():
    z = np.zeros((3, 3))
    assert dice_loss(Tensor(z), z).data == 0.0
    assert jaccard_term(Tensor(z), z).data == 0.0


def test_cross_entropy_examples():
    p = np.array([[0.25, 0.75]]).reshape(1, 2, 1)
    y = np.array([[0.0, 1.0]]).reshape(1, 2, 1)
    assert cross_entropy(Tensor(p), y).data == pytest.approx(-np.log(0.75), abs=1e-15)
    uniform = np.full((1, 2, 6), 0.5)
    assert cross_entropy(Tensor(uniform), one_hot(np.zeros((1, 6), int), 2, np.float64)).data == \
        pytest.approx(np.log(2), abs=1e-15)
    zero = np.array([1.0, 0.0]).reshape(1, 2, 1)
    with pytest.raises(NumericError):
        cross_entropy(Tensor(zero), y, eps=None)
    assert np.isfinite(cross_entropy(Tensor(zero), y).data)
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(p), np.ones((1, 2, 2)))


def test_losses_match_scalar_oracles():
    rng = np.random.default_rng(11)
    for _ in range(10):
        p = rng.random((2, 3, 4))
        g = (rng.random((2, 3, 4)) > 0.5).astype(float)
        assert abs(dice_loss(Tensor(p), g).data - reference.dice_ref(p, g)) < 1e-10
        assert abs(jaccard_term(Tensor(p), g).data - reference.jaccard_ref(p, g)) < 1e-10
        assert abs(dice_iou_loss(Tensor(p), g).data - reference.dice_iou_ref(p, g)) < 1e-10
        probs = rng.random((2, 2, 5)) + 0.05
        probs /= probs.sum(axis=1, keepdims=True)
        y = one_hot(rng.integers(0, 2, (2, 5)), 2, np.float64)
        assert abs(cross_entropy(Tensor(probs), y).data - reference.cross_entropy_ref(probs, y)) < 1e-10


def test_loss_gradchecks():
    g = (np.random.default_rng(0).random((2, 3, 3)) > 0.5).astype(float)
    for fn in (lambda p: dice_loss(p, g), lambda p: jaccard_term(p, g), lambda p: dice_iou_loss(p, g)):
        x = Tensor(np.random.default_rng(1).random((2, 3, 3)) * 0.8 + 0.1, requires_grad=True)
        assert grad_check(fn, [x], tolerance=1e-6).passed
    y = one_hot(np.array([[0, 1, 1]]), 2, np.float64)
    x = Tensor(np.array([[0.3, 0.6, 0.2], [0.7, 0.4, 0.8]])[None], requires_grad=True)
    assert grad_check(lambda p: cross_entropy(p, y), [x], tolerance=1e-6).passed


def _nested(outer, inner):
    return all(i <= o for i, o in zip(inner.ravel(), outer.ravel()))


def test_error_monotonicity_on_nested_masks():
    # every pair of nested binary predictions on a 3x3 grid, against one fixed gt
    gt = np.array([[0, 1, 1], [0, 1, 0], [0, 0, 0]], float)
    masks = [np.array(bits, float).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]
    covered = [m for m in masks if _nested(gt, m)]
    for inner in covered:
        for outer in covered:
            if _nested(outer, inner):
                assert dice_loss(Tensor(outer), gt).data <= dice_loss(Tensor(inner), gt).data + 1e-15
                assert jaccard_term(Tensor(outer), gt).data <= jaccard_term(Tensor(inner), gt).data + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_overlap_losses_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = rng.random(12)
    g = (rng.random(12) > 0.5).astype(float)
    order = rng.permutation(12)
    for fn in (dice_loss, jaccard_term):
        assert abs(fn(Tensor(p), g).data - fn(Tensor(p[order]), g[order]).data) < 1e-12


def test_unsmoothed_dice_loss_matches_metric():
    rng = np.random.default_rng(2)
    for _ in range(10):
        pred = (rng.random((6, 6)) > 0.5).astype(float)
        gt = (rng.random((6, 6)) > 0.4).astype(float)
        assert abs(1 - dice_loss(Tensor(pred), gt, f_smooth=0.0).data - compute_metrics(pred, gt).dice) < 1e-12


def test_metric_examples():
    gt = np.zeros(20, np.uint8)
    gt[:10] = 1
    pred = np.zeros(20, np.uint8)
    pred[:8] = 1
    pred[10:12] = 1
    rep = compute_metrics(pred, gt)
    assert (rep.dice, rep.sensitivity, rep.ppv) == pytest.approx((0.8, 0.8, 0.8), abs=1e-15)
    assert (rep.tp, rep.fp, rep.fn, rep.tn) == (8, 2, 2, 8)
    assert compute_metrics(gt, gt).dice == 1.0


def test_empty_prediction_flags_ppv():
    gt = np.ones((3, 3))
    rep = compute_metrics(np.zeros((3, 3)), gt)
    assert rep.dice == 0.0 and rep.sensitivity == 0.0 and rep.ppv is None
    assert rep.flags == ["ppv_undefined"]
    assert rep.to_dict()["flags"] == ["ppv_undefined"]


def test_aggregate_is_subject_level():
    gt = np.ones(4)
    reports = [compute_metrics(np.array(p), gt) for p in ([1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 0, 0])]
    with pytest.warns(UserWarning, match="ppv"):
        agg = aggregate(reports, ["A", "A", "B"])
    # A: mean(1, 2/3); B: 0
    dice_a = (1 + 2 / 3) / 2
    assert agg["dice"]["mean"] == pytest.approx(dice_a / 2, abs=1e-12)
    assert agg["dice"]["sd"] == pytest.approx(np.std([dice_a, 0.0], ddof=1), abs=1e-12)
    assert agg["ppv"]["excluded_records"] == 1 and agg["ppv"]["groups"] == 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        aggregate(reports[:2], ["A", "B"])


def test_binarize_ties_and_segmentation_loss_names():
    probs = np.array([[[0.5, 0.2], [0.5, 0.8]]])
    assert binarize(probs).tolist() == [[0, 1]]
    p = Tensor(np.full((1, 2, 1, 2, 2), 0.5))
    mask = np.ones((1, 1, 2, 2), np.uint8)
    for name in ("cross_entropy", "dice", "dice_iou"):
        assert np.isfinite(segmentation_loss(name, p, mask).data)
    with pytest.raises(ValueError):
        segmentation_loss("focal", p, mask)
