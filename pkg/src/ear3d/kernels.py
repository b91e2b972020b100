"""Hot array kernels, each with a numba loop and a numpy fallback.

The public functions dispatch on :func:`ear3d._accel.use_numba`.  Both paths
are deterministic and are checked against each other in the test-suite; the
``*_numpy`` / ``*_numba`` names stay importable for that purpose and for
``benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, prange, use_numba


# ---------------------------------------------------------------------------
# im2col / col2im for 3D convolution
#
# cols layout: [C*kt*kh*kw, N*To*Ho*Wo], row index (c, a, b, d) row-major,
# column index (n, t, h, w) row-major.
# ---------------------------------------------------------------------------

def im2col_numpy(xp: np.ndarray, kernel, stride, out_shape) -> np.ndarray:
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_shape
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, : (to - 1) * st + 1 : st, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # [N,C,To,Ho,Wo,kt,kh,kw] -> [C,kt,kh,kw,N,To,Ho,Wo]
    return win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(c * kt * kh * kw, n * to * ho * wo)


@njit
def _im2col_loop(xp, kt, kh, kw, st, sh, sw, to, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * kt * kh * kw, n * to * ho * wo), dtype=xp.dtype)
    for ci in range(c):
        for a in range(kt):
            for b in range(kh):
                for d in range(kw):
                    row = ((ci * kt + a) * kh + b) * kw + d
                    col = 0
                    for ni in range(n):
                        for t in range(to):
                            ti = t * st + a
                            for h in range(ho):
                                hi = h * sh + b
                                for w in range(wo):
                                    cols[row, col] = xp[ni, ci, ti, hi, w * sw + d]
                                    col += 1
    return cols


def im2col_numba(xp, kernel, stride, out_shape):
    return _im2col_loop(np.ascontiguousarray(xp), *kernel, *stride, *out_shape)


def im2col(xp, kernel, stride, out_shape):
    if use_numba():
        return im2col_numba(xp, kernel, stride, out_shape)
    return im2col_numpy(xp, kernel, stride, out_shape)


def col2im_numpy(cols, padded_shape, kernel, stride, out_shape) -> np.ndarray:
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_shape
    n, c = padded_shape[:2]
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    blocks = cols.reshape(c, kt, kh, kw, n, to, ho, wo)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                dxp[:, :, a : a + (to - 1) * st + 1 : st,
                    b : b + (ho - 1) * sh + 1 : sh,
                    d : d + (wo - 1) * sw + 1 : sw] += blocks[:, a, b, d].transpose(1, 0, 2, 3, 4)
    return dxp


@njit
def _col2im_loop(cols, dxp, kt, kh, kw, st, sh, sw, to, ho, wo):
    n, c = dxp.shape[0], dxp.shape[1]
    for ci in range(c):
        for a in range(kt):
            for b in range(kh):
                for d in range(kw):
                    row = ((ci * kt + a) * kh + b) * kw + d
                    col = 0
                    for ni in range(n):
                        for t in range(to):
                            ti = t * st + a
                            for h in range(ho):
                                hi = h * sh + b
                                for w in range(wo):
                                    dxp[ni, ci, ti, hi, w * sw + d] += cols[row, col]
                                    col += 1
    return dxp


def col2im_numba(cols, padded_shape, kernel, stride, out_shape):
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    return _col2im_loop(np.ascontiguousarray(cols), dxp, *kernel, *stride, *out_shape)


def col2im(cols, padded_shape, kernel, stride, out_shape):
    if use_numba():
        return col2im_numba(cols, padded_shape, kernel, stride, out_shape)
    return col2im_numpy(cols, padded_shape, kernel, stride, out_shape)


def conv_forward_im2col(xp, w, stride, out_shape, cols_fn=im2col_numpy):
    n = xp.shape[0]
    cout = w.shape[0]
    cols = cols_fn(xp, w.shape[2:], stride, out_shape)
    out = (w.reshape(cout, -1) @ cols).reshape((cout, n) + tuple(out_shape))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def conv_backward_im2col(g, xp, w, stride, out_shape, need_dx=True, need_dw=True,
                         cols_fn=im2col_numpy, scatter_fn=col2im_numpy):
    cout = w.shape[0]
    kernel = w.shape[2:]
    g2 = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
    dw = dxp = None
    if need_dw:
        cols = cols_fn(xp, kernel, stride, out_shape)
        dw = (g2 @ cols.T).reshape(w.shape)
    if need_dx:
        dxp = scatter_fn(w.reshape(cout, -1).T @ g2, xp.shape, kernel, stride, out_shape)
    return dxp, dw


# direct stride-1 loops; the innermost loop runs along W and vectorises.  The
# parallel axis always owns a disjoint slice of the output, so results do not
# depend on the thread count.
@njit(fastmath=True, parallel=True)
def _conv_fwd_direct(xp, w, out):
    n, cout, to, ho, wo = out.shape
    cin, kt, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    for job in prange(n * cout):
        ni, co = job // cout, job % cout
        for t in range(to):
            for h in range(ho):
                orow = out[ni, co, t, h]
                for ci in range(cin):
                    for a in range(kt):
                        for b in range(kh):
                            xrow = xp[ni, ci, t + a, h + b]
                            for d in range(kw):
                                wv = w[co, ci, a, b, d]
                                for x in range(wo):
                                    orow[x] += wv * xrow[x + d]
    return out


@njit(fastmath=True, parallel=True)
def _conv_bwd_input_direct(g, w, dxp):
    n, cout, to, ho, wo = g.shape
    cin, kt, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    for job in prange(n * cin):
        ni, ci = job // cin, job % cin
        for co in range(cout):
            for t in range(to):
                for h in range(ho):
                    grow = g[ni, co, t, h]
                    for a in range(kt):
                        for b in range(kh):
                            drow = dxp[ni, ci, t + a, h + b]
                            for d in range(kw):
                                wv = w[co, ci, a, b, d]
                                for x in range(wo):
                                    drow[x + d] += wv * grow[x]
    return dxp


@njit(fastmath=True, parallel=True)
def _conv_bwd_weight_direct(g, xp, dw):
    n, cout, to, ho, wo = g.shape
    cin, kt, kh, kw = dw.shape[1], dw.shape[2], dw.shape[3], dw.shape[4]
    for co in prange(cout):
        for ci in range(cin):
            for a in range(kt):
                for b in range(kh):
                    for d in range(kw):
                        acc = dw[co, ci, a, b, d]
                        for ni in range(n):
                            for t in range(to):
                                for h in range(ho):
                                    grow = g[ni, co, t, h]
                                    xrow = xp[ni, ci, t + a, h + b]
                                    for x in range(wo):
                                        acc += grow[x] * xrow[x + d]
                        dw[co, ci, a, b, d] = acc
    return dw


def conv_forward_numba(xp, w, stride, out_shape):
    if tuple(stride) != (1, 1, 1):
        return conv_forward_im2col(xp, w, stride, out_shape, cols_fn=im2col_numba)
    out = np.zeros((xp.shape[0], w.shape[0]) + tuple(out_shape), dtype=xp.dtype)
    return _conv_fwd_direct(np.ascontiguousarray(xp), np.ascontiguousarray(w), out)


def conv_backward_numba(g, xp, w, stride, out_shape, need_dx=True, need_dw=True):
    if tuple(stride) != (1, 1, 1):
        return conv_backward_im2col(g, xp, w, stride, out_shape, need_dx, need_dw,
                                    cols_fn=im2col_numba, scatter_fn=col2im_numba)
    g = np.ascontiguousarray(g)
    dxp = dw = None
    if need_dx:
        dxp = _conv_bwd_input_direct(g, np.ascontiguousarray(w), np.zeros(xp.shape, dtype=g.dtype))
    if need_dw:
        dw = _conv_bwd_weight_direct(g, np.ascontiguousarray(xp), np.zeros(w.shape, dtype=g.dtype))
    return dxp, dw


def conv_forward(xp, w, stride, out_shape):
    """Bias-free cross-correlation of a padded input; returns ``[N, C_out, *out_shape]``."""
    if use_numba():
        return conv_forward_numba(xp, w, stride, out_shape)
    return conv_forward_im2col(xp, w, stride, out_shape)


def conv_backward(g, xp, w, stride, out_shape, need_dx=True, need_dw=True):
    """Gradients w.r.t. the padded input and the weight (either may be skipped)."""
    if use_numba():
        return conv_backward_numba(g, xp, w, stride, out_shape, need_dx, need_dw)
    return conv_backward_im2col(g, xp, w, stride, out_shape, need_dx, need_dw)


# ---------------------------------------------------------------------------
# non-overlapping max pooling; ties resolve to the first element of the
# window in row-major (t, h, w) order
# ---------------------------------------------------------------------------

def _windows(x, window):
    n, c, t, h, w = x.shape
    pt, ph, pw = window
    v = x.reshape(n, c, t // pt, pt, h // ph, ph, w // pw, pw)
    v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return v.reshape(n, c, t // pt, h // ph, w // pw, pt * ph * pw)


def maxpool_forward_numpy(x, window):
    win = _windows(x, window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward_numpy(g, arg, in_shape, window):
    n, c, t, h, w = in_shape
    pt, ph, pw = window
    gw = np.zeros(g.shape + (pt * ph * pw,), dtype=g.dtype)
    np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
    gw = gw.reshape(n, c, t // pt, h // ph, w // pw, pt, ph, pw)
    return gw.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(in_shape)


@njit
def _maxpool_fwd_loop(x, pt, ph, pw):
    n, c, t, h, w = x.shape
    to, ho, wo = t // pt, h // ph, w // pw
    out = np.empty((n, c, to, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, to, ho, wo), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for i in range(to):
                for j in range(ho):
                    for k in range(wo):
                        best = x[ni, ci, i * pt, j * ph, k * pw]
                        bi = 0
                        idx = 0
                        for a in range(pt):
                            for b in range(ph):
                                for d in range(pw):
                                    v = x[ni, ci, i * pt + a, j * ph + b, k * pw + d]
                                    if v > best:
                                        best = v
                                        bi = idx
                                    idx += 1
                        out[ni, ci, i, j, k] = best
                        arg[ni, ci, i, j, k] = bi
    return out, arg


@njit
def _maxpool_bwd_loop(g, arg, dx, pt, ph, pw):
    n, c, to, ho, wo = g.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(to):
                for j in range(ho):
                    for k in range(wo):
                        bi = arg[ni, ci, i, j, k]
                        a = bi // (ph * pw)
                        b = (bi // pw) % ph
                        d = bi % pw
                        dx[ni, ci, i * pt + a, j * ph + b, k * pw + d] += g[ni, ci, i, j, k]
    return dx


def maxpool_forward_numba(x, window):
    return _maxpool_fwd_loop(np.ascontiguousarray(x), *window)


def maxpool_backward_numba(g, arg, in_shape, window):
    dx = np.zeros(in_shape, dtype=g.dtype)
    return _maxpool_bwd_loop(np.ascontiguousarray(g), arg, dx, *window)


def maxpool_forward(x, window):
    if use_numba():
        return maxpool_forward_numba(x, window)
    return maxpool_forward_numpy(x, window)


def maxpool_backward(g, arg, in_shape, window):
    if use_numba():
        return maxpool_backward_numba(g, arg, in_shape, window)
    return maxpool_backward_numpy(g, arg, in_shape, window)


# ---------------------------------------------------------------------------
# 4-connected component labelling of a 2D binary image
# labels are 1..n in raster order of each component's first pixel
# ---------------------------------------------------------------------------

@njit
def _label4_loop(img):
    h, w = img.shape
    labels = np.zeros((h, w), dtype=np.int32)
    stack = np.empty(h * w, dtype=np.int64)
    current = 0
    for r0 in range(h):
        for c0 in range(w):
            if img[r0, c0] == 0 or labels[r0, c0] != 0:
                continue
            current += 1
            labels[r0, c0] = current
            top = 0
            stack[top] = r0 * w + c0
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                r = p // w
                c = p % w
                if r > 0 and img[r - 1, c] != 0 and labels[r - 1, c] == 0:
                    labels[r - 1, c] = current
                    stack[top] = p - w
                    top += 1
                if r < h - 1 and img[r + 1, c] != 0 and labels[r + 1, c] == 0:
                    labels[r + 1, c] = current
                    stack[top] = p + w
                    top += 1
                if c > 0 and img[r, c - 1] != 0 and labels[r, c - 1] == 0:
                    labels[r, c - 1] = current
                    stack[top] = p - 1
                    top += 1
                if c < w - 1 and img[r, c + 1] != 0 and labels[r, c + 1] == 0:
                    labels[r, c + 1] = current
                    stack[top] = p + 1
                    top += 1
    return labels, current


def label4_numba(img: np.ndarray):
    return _label4_loop(np.ascontiguousarray(img, dtype=np.uint8))


def label4_numpy(img: np.ndarray):
    from scipy import ndimage

    labels, n = ndimage.label(np.asarray(img) != 0)
    return labels.astype(np.int32), int(n)


def label4(img: np.ndarray):
    """Label 4-connected foreground components; returns ``(labels, count)``."""
    if use_numba():
        labels, n = label4_numba(img)
        return labels, int(n)
    return label4_numpy(img)


# ---------------------------------------------------------------------------
# attention  A = softmax(Q K^T) along keys,  O = A V
# The forward pass is numpy-only: the exp over the (HW)^2 score block is the
# hot spot and numpy's SIMD exp beats numba's scalar exp by ~10x.
# ---------------------------------------------------------------------------

def _frame_workers() -> int:
    return max(1, os.cpu_count() or 1)


def _each_frame(fn, b: int):
    """Run ``fn(i)`` for ``i < b``, threaded across cores when there are several.

    Every call writes a disjoint slice, so results do not depend on scheduling;
    numpy releases the GIL inside the large ufunc and BLAS calls.
    """
    workers = min(b, _frame_workers())
    if workers <= 1:
        for i in range(b):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, range(b)))


def attention_forward(q, k, v, block_rows=64):
    """Returns ``(out, probs)`` for batched ``q, k, v`` of shape ``[B, L, C]``."""
    b, n, _ = q.shape
    probs = np.empty((b, n, n), dtype=q.dtype)
    out = np.empty(v.shape, dtype=q.dtype)

    def frame(i):
        kt = np.ascontiguousarray(k[i].T)
        for r in range(0, n, block_rows):
            s = probs[i, r : r + block_rows]
            np.matmul(q[i, r : r + block_rows], kt, out=s)
            np.subtract(s, s.max(axis=1, keepdims=True), out=s)
            np.exp(s, out=s)
            np.multiply(s, 1.0 / s.sum(axis=1, keepdims=True), out=s)
            np.matmul(s, v[i], out=out[i, r : r + block_rows])

    _each_frame(frame, b)
    return out, probs


def attention_backward_numpy(g, q, k, v, probs, block_rows=128):
    b, n, _ = q.shape
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)

    def frame(i):
        vt = np.ascontiguousarray(v[i].T)
        for r in range(0, n, block_rows):
            a = probs[i, r : r + block_rows]
            go = g[i, r : r + block_rows]
            dv[i] += a.T @ go
            ds = go @ vt
            ds -= (ds * a).sum(axis=1, keepdims=True)
            ds *= a
            dq[i, r : r + block_rows] = ds @ k[i]
            dk[i] += ds.T @ q[i, r : r + block_rows]

    _each_frame(frame, b)
    return dq, dk, dv


@njit(fastmath=True, parallel=True)
def _attention_bwd_loop(g, q, kt, vt, probs, dq, dkt, dvt):
    # query rows are processed four at a time so each pass over a key/value
    # row feeds four accumulators; the tail falls back to one row at a time.
    # Frames run in parallel and each writes only its own gradient slices.
    nb, n, c = q.shape
    for bi in prange(nb):
        ds = np.empty((4, n), dtype=q.dtype)
        for i0 in range(0, n, 4):
            r = min(4, n - i0)
            ds[:] = 0
            for ci in range(c):
                vrow = vt[bi, ci]
                if r == 4:
                    g0, g1 = g[bi, i0, ci], g[bi, i0 + 1, ci]
                    g2, g3 = g[bi, i0 + 2, ci], g[bi, i0 + 3, ci]
                    for j in range(n):
                        vj = vrow[j]
                        ds[0, j] += g0 * vj
                        ds[1, j] += g1 * vj
                        ds[2, j] += g2 * vj
                        ds[3, j] += g3 * vj
                else:
                    for rr in range(r):
                        gc = g[bi, i0 + rr, ci]
                        for j in range(n):
                            ds[rr, j] += gc * vrow[j]
            for rr in range(r):
                a = probs[bi, i0 + rr]
                rs = ds[rr, 0] * a[0]
                for j in range(1, n):
                    rs += ds[rr, j] * a[j]
                for j in range(n):
                    ds[rr, j] = a[j] * (ds[rr, j] - rs)
            for ci in range(c):
                krow = kt[bi, ci]
                dkrow = dkt[bi, ci]
                dvrow = dvt[bi, ci]
                for rr in range(r):
                    acc = ds[rr, 0] * krow[0]
                    for j in range(1, n):
                        acc += ds[rr, j] * krow[j]
                    dq[bi, i0 + rr, ci] = acc
                if r == 4:
                    q0, q1 = q[bi, i0, ci], q[bi, i0 + 1, ci]
                    q2, q3 = q[bi, i0 + 2, ci], q[bi, i0 + 3, ci]
                    g0, g1 = g[bi, i0, ci], g[bi, i0 + 1, ci]
                    g2, g3 = g[bi, i0 + 2, ci], g[bi, i0 + 3, ci]
                    a0, a1 = probs[bi, i0], probs[bi, i0 + 1]
                    a2, a3 = probs[bi, i0 + 2], probs[bi, i0 + 3]
                    for j in range(n):
                        dkrow[j] += ds[0, j] * q0 + ds[1, j] * q1 + ds[2, j] * q2 + ds[3, j] * q3
                        dvrow[j] += a0[j] * g0 + a1[j] * g1 + a2[j] * g2 + a3[j] * g3
                else:
                    for rr in range(r):
                        qc, gc = q[bi, i0 + rr, ci], g[bi, i0 + rr, ci]
                        a = probs[bi, i0 + rr]
                        for j in range(n):
                            dkrow[j] += ds[rr, j] * qc
                            dvrow[j] += a[j] * gc


def attention_backward_numba(g, q, k, v, probs):
    b, n, c = q.shape
    kt = np.ascontiguousarray(k.transpose(0, 2, 1))
    vt = np.ascontiguousarray(v.transpose(0, 2, 1))
    dq = np.empty_like(q)
    dkt = np.zeros((b, c, n), dtype=q.dtype)
    dvt = np.zeros((b, c, n), dtype=q.dtype)
    _attention_bwd_loop(np.ascontiguousarray(g), q, kt, vt, probs, dq, dkt, dvt)
    return dq, dkt.transpose(0, 2, 1), dvt.transpose(0, 2, 1)


def attention_backward(g, q, k, v, probs):
    """Gradients ``(dq, dk, dv)`` given the saved row-stochastic ``probs``."""
    if use_numba():
        return attention_backward_numba(g, q, k, v, probs)
    return attention_backward_numpy(g, q, k, v, probs)
