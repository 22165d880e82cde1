"""Fused numba kernels for the memory-bound inner loops.

Everything here is a plain loop nest over arrays that numpy would otherwise
traverse several times with temporaries; on the narrow-memory CPUs this code
targets, the single-pass versions are 5-20x faster. All kernels are
deterministic: parallel loops split work along axes whose writes never
collide (images or channels), and accumulation order within each slice is
fixed.

Kernels are compiled lazily per dtype and cached on disk.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def pool_fwd(x, k, stride, pad, y, best):
    """Ceil-mode max pool; out-of-bounds (padded) cells act as -inf.

    Records the winning window cell (first on ties, row-major) in ``best``.
    """
    n, c, h, w = x.shape
    oh, ow = y.shape[2], y.shape[3]
    for plane in prange(n * c):
        i = plane // c
        j = plane % c
        for a in range(oh):
            r0 = a * stride - pad
            for b in range(ow):
                c0 = b * stride - pad
                m = -np.inf
                arg = 0
                for di in range(k):
                    r = r0 + di
                    if r < 0 or r >= h:
                        continue
                    for dj in range(k):
                        cc = c0 + dj
                        if cc < 0 or cc >= w:
                            continue
                        v = x[i, j, r, cc]
                        if v > m:
                            m = v
                            arg = di * k + dj
                y[i, j, a, b] = m
                best[i, j, a, b] = arg


@njit(parallel=True, cache=True)
def pool_bwd(gy, best, k, stride, pad, dx):
    """Scatter each output's gradient to its recorded argmax position."""
    n, c, oh, ow = gy.shape
    h, w = dx.shape[2], dx.shape[3]
    for plane in prange(n * c):
        i = plane // c
        j = plane % c
        for a in range(oh):
            for b in range(ow):
                arg = best[i, j, a, b]
                r = a * stride - pad + arg // k
                cc = b * stride - pad + arg % k
                if 0 <= r < h and 0 <= cc < w:
                    dx[i, j, r, cc] += gy[i, j, a, b]


@njit(parallel=True, fastmath=True, cache=True)
def channel_moments(x):
    """Per-channel, per-image partial (sum, sum of squares) over (N, C, H, W).

    Returns (N, 2, C) float64; summing over axis 0 outside keeps the final
    reduction order independent of the thread count.
    """
    n, c, h, w = x.shape
    part = np.zeros((n, 2, c), np.float64)
    for i in prange(n):
        for j in range(c):
            s = 0.0
            s2 = 0.0
            for a in range(h):
                for b in range(w):
                    v = np.float64(x[i, j, a, b])
                    s += v
                    s2 += v * v
            part[i, 0, j] = s
            part[i, 1, j] = s2
    return part


@njit(parallel=True, fastmath=True, cache=True)
def channel_grad_moments(gy, x):
    """Per-channel, per-image partial (sum gy, sum gy*x) over (N, C, H, W)."""
    n, c, h, w = x.shape
    part = np.zeros((n, 2, c), np.float64)
    for i in prange(n):
        for j in range(c):
            s = 0.0
            sx = 0.0
            for a in range(h):
                for b in range(w):
                    g = np.float64(gy[i, j, a, b])
                    s += g
                    sx += g * np.float64(x[i, j, a, b])
            part[i, 0, j] = s
            part[i, 1, j] = sx
    return part


@njit(parallel=True, cache=True)
def channel_affine(x, a, b, out):
    """out = x * a[channel] + b[channel]."""
    n, c, h, w = x.shape
    for plane in prange(n * c):
        i = plane // c
        j = plane % c
        aj = a[j]
        bj = b[j]
        for r in range(h):
            for cc in range(w):
                out[i, j, r, cc] = x[i, j, r, cc] * aj + bj


@njit(parallel=True, cache=True)
def channel_affine_pair(gy, x, g, bx, c0, out):
    """out = gy * g[ch] - x * bx[ch] + c0[ch] (train-mode batchnorm input grad)."""
    n, c, h, w = x.shape
    for plane in prange(n * c):
        i = plane // c
        j = plane % c
        gj = g[j]
        bj = bx[j]
        cj = c0[j]
        for r in range(h):
            for cc in range(w):
                out[i, j, r, cc] = gy[i, j, r, cc] * gj - x[i, j, r, cc] * bj + cj


@njit(parallel=True, cache=True)
def im2col(x, kh, kw, stride, oh, ow, cols):
    """Unfold (N, C, H, W) into (N*oh*ow, C*kh*kw) rows."""
    n, c = x.shape[0], x.shape[1]
    for p in prange(n * oh * ow):
        i = p // (oh * ow)
        rem = p % (oh * ow)
        r0 = (rem // ow) * stride
        c0 = (rem % ow) * stride
        q = 0
        for ch in range(c):
            for di in range(kh):
                for dj in range(kw):
                    cols[p, q] = x[i, ch, r0 + di, c0 + dj]
                    q += 1


@njit(parallel=True, cache=True)
def col2im(dcols, kh, kw, stride, oh, ow, dx):
    """Scatter-add (N*oh*ow, C*kh*kw) rows back onto (N, C, H, W)."""
    n, c = dx.shape[0], dx.shape[1]
    for i in prange(n):
        for a in range(oh):
            for b in range(ow):
                p = (i * oh + a) * ow + b
                q = 0
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            dx[i, ch, a * stride + di, b * stride + dj] += dcols[p, q]
                            q += 1


@njit(parallel=True, cache=True)
def rows_to_nchw(y2d, oh, ow, out):
    """(N*oh*ow, O) gemm output rows -> contiguous (N, O, oh, ow)."""
    n, o = out.shape[0], out.shape[1]
    for i in prange(n):
        for a in range(oh):
            for b in range(ow):
                p = (i * oh + a) * ow + b
                for ch in range(o):
                    out[i, ch, a, b] = y2d[p, ch]


@njit(parallel=True, cache=True)
def nchw_to_rows(x, out):
    """Contiguous (N, O, oh, ow) -> (N*oh*ow, O) rows."""
    n, o, oh, ow = x.shape
    for i in prange(n):
        for a in range(oh):
            for b in range(ow):
                p = (i * oh + a) * ow + b
                for ch in range(o):
                    out[p, ch] = x[i, ch, a, b]


@njit(parallel=True, cache=True)
def relu_bwd(gy, out):
    """In place: gy *= (out > 0), flattened views."""
    for i in prange(gy.size):
        if out[i] <= 0:
            gy[i] = 0


# ---------------------------------------------------------------------------
# fused conv-block helpers working on the gemm's (N*oh*ow, O) row layout
# ---------------------------------------------------------------------------


@njit(parallel=True, fastmath=True, cache=True)
def col_moments(y2d, nchunks):
    """Per-column (sum, sum of squares) of (M, O) in fixed-size chunks.

    Returns (nchunks, 2, O) float64 partials; summing them over axis 0 in
    numpy gives a reduction order independent of the thread count.
    """
    m, o = y2d.shape
    part = np.zeros((nchunks, 2, o), np.float64)
    step = (m + nchunks - 1) // nchunks
    for ci in prange(nchunks):
        lo = ci * step
        hi = min(lo + step, m)
        for r in range(lo, hi):
            for ch in range(o):
                v = np.float64(y2d[r, ch])
                part[ci, 0, ch] += v
                part[ci, 1, ch] += v * v
    return part


@njit(parallel=True, cache=True)
def bn_relu_rows_to_nchw(y2d, a, b, oh, ow, out):
    """out[i,ch,r,c] = max(y2d[row, ch] * a[ch] + b[ch], 0); NaN propagates."""
    n, o = out.shape[0], out.shape[1]
    for i in prange(n):
        for r in range(oh):
            for c in range(ow):
                p = (i * oh + r) * ow + c
                for ch in range(o):
                    v = y2d[p, ch] * a[ch] + b[ch]
                    out[i, ch, r, c] = v if v > 0 else v * 0


@njit(parallel=True, fastmath=True, cache=True)
def bn_relu_bwd_moments(g, post, y2d):
    """Per-image partials of (sum g*mask, sum g*mask*y2d) per channel.

    ``mask`` is (post > 0), the relu gate. Returns (N, 2, O) float64; sum
    over axis 0 outside.
    """
    n, o, oh, ow = g.shape
    part = np.zeros((n, 2, o), np.float64)
    for i in prange(n):
        for ch in range(o):
            s = 0.0
            sx = 0.0
            for r in range(oh):
                for c in range(ow):
                    if post[i, ch, r, c] > 0:
                        gv = np.float64(g[i, ch, r, c])
                        s += gv
                        sx += gv * np.float64(y2d[(i * oh + r) * ow + c, ch])
            part[i, 0, ch] = s
            part[i, 1, ch] = sx
    return part


@njit(parallel=True, cache=True)
def bn_relu_bwd_rows(g, post, y2d, gc, bx, c0, gym):
    """Fused relu + batch-norm input gradient, written in row layout.

    gym[row, ch] = (g if post>0 else 0) * gc[ch] - y2d[row, ch] * bx[ch] + c0[ch]
    """
    n, o, oh, ow = g.shape
    for i in prange(n):
        for r in range(oh):
            for c in range(ow):
                p = (i * oh + r) * ow + c
                for ch in range(o):
                    gm = g[i, ch, r, c]
                    if post[i, ch, r, c] <= 0:
                        gm = gm * 0  # keep the branch dtype-stable
                    gym[p, ch] = gm * gc[ch] - y2d[p, ch] * bx[ch] + c0[ch]


@njit(parallel=True, cache=True)
def adam_update(theta, g, m, v, beta1, beta2, eps, c1, c2, lr):
    """Fused Adam step over flattened views, in place."""
    for i in prange(theta.size):
        gi = g[i]
        mi = m[i] * beta1 + (1.0 - beta1) * gi
        vi = v[i] * beta2 + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        theta[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
