"""Scalar-loop reference implementations.

Deliberately naive: explicit Python loops over every index, ``math.exp`` and
friends, no vectorisation and no shared code with the kernels they check.
Used by the verification suite and the tests; only run them on tiny inputs.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def matmul_ref(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def softmax_ref(x, axis=-1):
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        top = max(row)
        exps = [math.exp(v - top) for v in row]
        total = sum(exps)
        out[idx] = [e / total for e in exps]
    return np.moveaxis(out, -1, axis)


def conv3d_ref(x, w, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Cross-correlation of ``[N,Ci,T,H,W]`` with ``[Co,Ci,kt,kh,kw]`` by seven nested loops."""
    x, w = np.asarray(x, dtype=np.float64), np.asarray(w, dtype=np.float64)
    n, ci_n, t_n, h_n, w_n = x.shape
    co_n, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    to = (t_n + 2 * pt - kt) // st + 1
    ho = (h_n + 2 * ph - kh) // sh + 1
    wo = (w_n + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co_n, to, ho, wo))
    for b in range(n):
        for co in range(co_n):
            for t in range(to):
                for i in range(ho):
                    for j in range(wo):
                        s = 0.0 if bias is None else float(bias[co])
                        for ci in range(ci_n):
                            for a in range(kt):
                                for c in range(kh):
                                    for d in range(kw):
                                        tt = t * st + a - pt
                                        ii = i * sh + c - ph
                                        jj = j * sw + d - pw
                                        if 0 <= tt < t_n and 0 <= ii < h_n and 0 <= jj < w_n:
                                            s += x[b, ci, tt, ii, jj] * w[co, ci, a, c, d]
                        out[b, co, t, i, j] = s
    return out


def maxpool_ref(x, window):
    x = np.asarray(x, dtype=np.float64)
    n, c, t, h, w = x.shape
    wt, wh, ww = window
    out = np.empty((n, c, t // wt, h // wh, w // ww))
    for idx in np.ndindex(*out.shape):
        b, ch, i, j, k = idx
        best = -math.inf
        for a in range(wt):
            for p in range(wh):
                for q in range(ww):
                    best = max(best, x[b, ch, i * wt + a, j * wh + p, k * ww + q])
        out[idx] = best
    return out


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def lstm_step_ref(x, h, c, w_ih, w_hh, b_ih, b_hh):
    """One step for a batch; gate order (input, forget, cell, output)."""
    x, h, c = (np.asarray(v, dtype=np.float64) for v in (x, h, c))
    bsz, hs = h.shape
    h_new, c_new = np.empty((bsz, hs)), np.empty((bsz, hs))
    for b in range(bsz):
        for u in range(hs):
            pre = []
            for gate in range(4):
                row = gate * hs + u
                s = float(b_ih[row]) + float(b_hh[row])
                for p in range(x.shape[1]):
                    s += w_ih[row, p] * x[b, p]
                for p in range(hs):
                    s += w_hh[row, p] * h[b, p]
                pre.append(s)
            i, f, g, o = _sigmoid(pre[0]), _sigmoid(pre[1]), math.tanh(pre[2]), _sigmoid(pre[3])
            c_new[b, u] = f * c[b, u] + i * g
            h_new[b, u] = o * math.tanh(c_new[b, u])
    return h_new, c_new


def lstm_sequence_ref(xs, w_ih, w_hh, b_ih, b_hh):
    xs = np.asarray(xs, dtype=np.float64)
    bsz, steps, _ = xs.shape
    hs = w_hh.shape[1]
    h, c = np.zeros((bsz, hs)), np.zeros((bsz, hs))
    out = np.empty((bsz, steps, hs))
    for t in range(steps):
        h, c = lstm_step_ref(xs[:, t], h, c, w_ih, w_hh, b_ih, b_hh)
        out[:, t] = h
    return out


def attention_ref(q, k, v):
    """``softmax(q k^T) v`` per batch entry, softmax along keys."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    bsz, n, ch = q.shape
    out = np.zeros_like(q)
    probs = np.zeros((bsz, n, n))
    for b in range(bsz):
        for i in range(n):
            scores = []
            for j in range(n):
                s = 0.0
                for p in range(ch):
                    s += q[b, i, p] * k[b, j, p]
                scores.append(s)
            top = max(scores)
            exps = [math.exp(s - top) for s in scores]
            total = sum(exps)
            for j in range(n):
                probs[b, i, j] = exps[j] / total
                for p in range(ch):
                    out[b, i, p] += probs[b, i, j] * v[b, j, p]
    return out, probs


def pointwise_conv_ref(f, w, bias):
    """1x1x1 convolution of ``[N,C,T,H,W]``: per-pixel channel mixing."""
    f = np.asarray(f, dtype=np.float64)
    n, c, t, h, wd = f.shape
    co = w.shape[0]
    out = np.empty((n, co, t, h, wd))
    for b, i, y, x in np.ndindex(n, t, h, wd):
        for o in range(co):
            s = float(bias[o])
            for p in range(c):
                s += w[o, p, 0, 0, 0] * f[b, p, i, y, x]
            out[b, o, i, y, x] = s
    return out


def attention_block_ref(f, wk, bk, wv, bv):
    """Per-frame attention with raw features as queries and 1x1x1 projections as keys/values."""
    f = np.asarray(f, dtype=np.float64)
    n, c, t, h, w = f.shape
    keys = pointwise_conv_ref(f, wk, bk)
    vals = pointwise_conv_ref(f, wv, bv)
    out = np.empty_like(f)
    for b in range(n):
        for i in range(t):
            rows = lambda a: a[b, :, i].reshape(c, h * w).T[None]
            o, _ = attention_ref(rows(f), rows(keys), rows(vals))
            out[b, :, i] = o[0].T.reshape(c, h, w)
    return out


def cross_entropy_ref(pred, target, eps=1e-7):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    k = pred.shape[1]
    total, pixels = 0.0, 0
    for idx in np.ndindex(pred.shape[0], *pred.shape[2:]):
        pixels += 1
        for cls in range(k):
            full = (idx[0], cls) + idx[1:]
            total -= target[full] * math.log(max(pred[full], eps))
    return total / pixels


def _soft_counts(pred, gt):
    inter = n_gt = n_pred = 0.0
    for p, g in zip(np.asarray(pred, dtype=np.float64).ravel(), np.asarray(gt, dtype=np.float64).ravel()):
        inter += p * g
        n_gt += g
        n_pred += p
    return inter, n_gt, n_pred


def dice_ref(pred, gt, f=1.0):
    inter, n_gt, n_pred = _soft_counts(pred, gt)
    return 1.0 - (2.0 * inter + f) / (n_gt + n_pred + f)


def jaccard_ref(pred, gt, f=1.0):
    inter, n_gt, n_pred = _soft_counts(pred, gt)
    return 1.0 - (inter + f) / (n_gt + n_pred - inter + f)


def dice_iou_ref(preds, gts, f=1.0):
    preds, gts = np.asarray(preds), np.asarray(gts)
    return sum(dice_ref(p, g, f) * jaccard_ref(p, g, f) for p, g in zip(preds, gts)) / len(preds)


def components_ref(img):
    """4-connected labelling by breadth-first flood fill in raster order."""
    img = np.asarray(img).astype(bool)
    h, w = img.shape
    labels = np.zeros((h, w), dtype=np.int64)
    count = 0
    for r in range(h):
        for c in range(w):
            if not img[r, c] or labels[r, c]:
                continue
            count += 1
            labels[r, c] = count
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and img[yy, xx] and not labels[yy, xx]:
                        labels[yy, xx] = count
                        queue.append((yy, xx))
    return labels, count


def rotate90_ref(img):
    """Counter-clockwise quarter turn of the last two axes via the index map (r, c) -> (S-1-c, r)."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    out = np.empty(img.shape[:-2] + (w, h), dtype=img.dtype)
    for r in range(h):
        for c in range(w):
            out[..., w - 1 - c, r] = img[..., r, c]
    return out
