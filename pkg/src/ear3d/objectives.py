"""Training losses (cross-entropy, Dice, Dice x Jaccard) and evaluation metrics."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, clamp_min, div, log, mul, reduce_sum, reshape, scale,
                     slice_, sub, add)

DEFAULT_SMOOTH = 1.0


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: prediction {a.shape} and target {b.shape} differ")


def cross_entropy(pred: Tensor, target, eps: float | None = 1e-7) -> Tensor:
    """Mean over pixels of ``-sum_c y_c log p_c``; class axis is 1.

    ``eps`` clamps probabilities from below before the log; ``None`` disables
    the clamp, in which case a zero probability raises ``NumericError``.
    """
    target = _const(target, pred)
    _same_shape(pred, target, "cross_entropy")
    if pred.ndim < 2:
        raise ShapeError("cross_entropy needs a class axis at position 1")
    p = clamp_min(pred, eps) if eps is not None else pred
    pixels = pred.size // pred.shape[1]
    return scale(reduce_sum(mul(target, log(p))), -1.0 / pixels)


def _overlaps(pred: Tensor, gt: Tensor, axes):
    inter = reduce_sum(mul(pred, gt), axes)
    return inter, reduce_sum(gt, axes), reduce_sum(pred, axes)


def dice_loss(pred: Tensor, gt, f_smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """``1 - (2|GT∩P| + f) / (|GT| + |P| + f)`` with soft set sizes."""
    gt = _const(gt, pred)
    _same_shape(pred, gt, "dice_loss")
    inter, n_gt, n_pred = _overlaps(pred, gt, None)
    return _dice_from_sums(inter, n_gt, n_pred, f_smooth)


def jaccard_term(pred: Tensor, gt, f_smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """``1 - (|GT∩P| + f) / (|GT∪P| + f)``, i.e. one minus the smoothed Jaccard index."""
    gt = _const(gt, pred)
    _same_shape(pred, gt, "jaccard_term")
    inter, n_gt, n_pred = _overlaps(pred, gt, None)
    return _jaccard_from_sums(inter, n_gt, n_pred, f_smooth)


def _dice_from_sums(inter, n_gt, n_pred, f):
    num = add(scale(inter, 2.0), f)
    den = add(add(n_gt, n_pred), f)
    return sub(1.0, div(num, den))


def _jaccard_from_sums(inter, n_gt, n_pred, f):
    union = sub(add(n_gt, n_pred), inter)
    return sub(1.0, div(add(inter, f), add(union, f)))


def dice_iou_loss(preds: Tensor, gts, f_smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """Mean over the leading (sample) axis of per-sample Dice loss times Jaccard term."""
    gts = _const(gts, preds)
    _same_shape(preds, gts, "dice_iou_loss")
    if preds.ndim < 1 or preds.shape[0] < 1:
        raise ShapeError("dice_iou_loss needs at least one sample")
    axes = tuple(range(1, preds.ndim))
    if not axes:
        preds, gts = reshape(preds, (preds.shape[0], 1)), reshape(gts, (gts.shape[0], 1))
        axes = (1,)
    inter, n_gt, n_pred = _overlaps(preds, gts, axes)
    per_sample = mul(_dice_from_sums(inter, n_gt, n_pred, f_smooth),
                     _jaccard_from_sums(inter, n_gt, n_pred, f_smooth))
    return scale(reduce_sum(per_sample), 1.0 / preds.shape[0])


LOSSES = ("cross_entropy", "dice", "dice_iou")


def foreground(probs: Tensor) -> Tensor:
    """Class-1 probabilities of ``[N, K, ...]`` as ``[N, ...]``."""
    n, k = probs.shape[:2]
    rest = probs.shape[2:]
    ranges = (slice(None), (1, 2))
    return reshape(slice_(probs, ranges), (n,) + rest)


def one_hot(mask: np.ndarray, classes: int = 2, dtype=np.float32) -> np.ndarray:
    """``[N, ...]`` integer labels to ``[N, K, ...]`` one-hot."""
    mask = np.asarray(mask)
    out = np.zeros((mask.shape[0], classes) + mask.shape[1:], dtype=dtype)
    for c in range(classes):
        out[:, c] = mask == c
    return out


def segmentation_loss(name: str, probs: Tensor, mask: np.ndarray, f_smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """Loss ``name`` between network output ``[N,K,T,H,W]`` and label mask ``[N,T,H,W]``."""
    if name == "cross_entropy":
        return cross_entropy(probs, one_hot(mask, probs.shape[1], probs.dtype))
    fg = foreground(probs)
    gt = np.asarray(mask, dtype=probs.dtype)
    if name == "dice":
        return dice_loss(fg, gt, f_smooth)
    if name == "dice_iou":
        return dice_iou_loss(fg, gt, f_smooth)
    raise ValueError(f"unknown loss {name!r}; choose from {LOSSES}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    dice: float | None
    sensitivity: float | None
    ppv: float | None
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def flags(self) -> list:
        return [f"{name}_undefined" for name in ("dice", "sensitivity", "ppv")
                if getattr(self, name) is None]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = self.flags
        return d


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


def compute_metrics(pred_mask, gt_mask) -> MetricReport:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return MetricReport(_ratio(2 * tp, 2 * tp + fp + fn), _ratio(tp, tp + fn), _ratio(tp, tp + fp),
                        tp, fp, fn, tn)


def binarize(probs) -> np.ndarray:
    """Class argmax of ``[N, K, ...]`` probabilities (ties go to the lower class)."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=1).astype(np.uint8)


def mean_sd(values) -> tuple:
    """Mean and sample standard deviation (0 for a single value) of defined values."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def aggregate(reports, groups) -> dict:
    """Group-level (subject-level) mean and sd of each metric.

    Records are first averaged within their group; undefined values are
    excluded with a warning rather than scored as 0 or 1.
    """
    reports = list(reports)
    groups = list(groups)
    if len(reports) != len(groups):
        raise ShapeError("one group label per report is required")
    out = {}
    for name in ("dice", "sensitivity", "ppv"):
        per_group = {}
        skipped = 0
        for rep, grp in zip(reports, groups):
            value = getattr(rep, name)
            if value is None:
                skipped += 1
                continue
            per_group.setdefault(grp, []).append(value)
        if skipped:
            warnings.warn(f"{skipped} record(s) with undefined {name} excluded from the aggregate",
                          stacklevel=2)
        group_means = [float(np.mean(v)) for _, v in sorted(per_group.items())]
        mean, sd = mean_sd(group_means)
        out[name] = {"mean": mean, "sd": sd, "groups": len(group_means), "excluded_records": skipped}
    return out

