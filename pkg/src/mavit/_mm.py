"""Jitted numeric kernels with a pinned evaluation order.

Every reduction here accumulates over its index in ascending order, one
multiply and one add per term, so matrix products are bit-identical to a
naive triple loop. BLAS-backed ``numpy.matmul`` does not guarantee this
(blocking and FMA change the rounding), which is why these kernels exist.
All loops run with numba's default strict IEEE settings: no fastmath, no
reassociation, no fused multiply-add.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _mm_shared(a, b, out):
    # (B, m, k) @ (k, n) -> (B, m, n)
    batch, m, k = a.shape
    n = b.shape[1]
    for bi in range(batch):
        for i in range(m):
            for j in range(n):
                out[bi, i, j] = 0.0
            for kk in range(k):
                aik = a[bi, i, kk]
                for j in range(n):
                    out[bi, i, j] += aik * b[kk, j]


@njit(cache=True)
def _mm_batched(a, b, out):
    # (B, m, k) @ (B, k, n) -> (B, m, n)
    batch, m, k = a.shape
    n = b.shape[2]
    for bi in range(batch):
        for i in range(m):
            for j in range(n):
                out[bi, i, j] = 0.0
            for kk in range(k):
                aik = a[bi, i, kk]
                for j in range(n):
                    out[bi, i, j] += aik * b[bi, kk, j]


def matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw array product over the last two axes, ascending-k accumulation.

    Supported layouts: plain 2-D x 2-D, stacked-left (L..., m, k) @ (k, n),
    and fully stacked (L..., m, k) @ (L..., k, n) with identical leading
    dims. Anything else is a caller bug and raises ValueError.
    """
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    lead = a.shape[:-2]
    if not (a.flags.c_contiguous and a.dtype == np.float64):
        a = np.ascontiguousarray(a, dtype=np.float64)
    if not (b.flags.c_contiguous and b.dtype == np.float64):
        b = np.ascontiguousarray(b, dtype=np.float64)
    a3 = a if a.ndim == 3 else a.reshape(-1, m, k)
    batch = a3.shape[0]
    out = np.empty((batch, m, n), dtype=np.float64)
    if b.ndim == 2:
        _mm_shared(a3, b, out)
    elif b.shape[:-2] == lead:
        _mm_batched(a3, b.reshape(batch, k, n), out)
    else:
        raise ValueError(f"unsupported leading dims: {a.shape} @ {b.shape}")
    return out if out.shape == lead + (m, n) else out.reshape(lead + (m, n))


@njit(cache=True)
def _ln_fwd(x, g, b, eps, y, xc, inv):
    # per-row: mean, centered copy, variance, then the affine map;
    # both sums run in ascending index order
    rows, dim = x.shape
    for r in range(rows):
        acc = 0.0
        for j in range(dim):
            acc += x[r, j]
        mu = acc / dim
        acc2 = 0.0
        for j in range(dim):
            c = x[r, j] - mu
            xc[r, j] = c
            acc2 += c * c
        s = 1.0 / np.sqrt(acc2 / dim + eps)
        inv[r] = s
        for j in range(dim):
            y[r, j] = xc[r, j] * s * g[j] + b[j]


@njit(cache=True)
def _threshold_rows(x, mass, mask, weights):
    """Top-mass selection per row of raw scores.

    Each row is softmaxed (row-max stabilized, ascending sums), then
    tokens are taken greedily in descending-weight order, lower index
    first on ties, until the selected mass reaches ``mass``; selected
    positions get mask 1. A fully selected row has its last-picked
    (lowest-relevance) token cleared again.
    """
    rows, n = x.shape
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        acc = 0.0
        for j in range(n):
            e = np.exp(x[r, j] - m)
            weights[r, j] = e
            acc += e
        for j in range(n):
            weights[r, j] = weights[r, j] / acc
            mask[r, j] = 0
        if mass <= 0.0:
            continue
        total = 0.0
        picked = 0
        last = -1
        while picked < n:
            best = -1
            best_w = -1.0
            for j in range(n):
                if mask[r, j] == 0 and weights[r, j] > best_w:
                    best_w = weights[r, j]
                    best = j
            mask[r, best] = 1
            total += best_w
            picked += 1
            last = best
            if total >= mass:
                break
        if picked == n:
            mask[r, last] = 0


@njit(cache=True)
def _softmax_fwd(x, y, sentinel):
    # row-max stabilization; returns True if a row consists entirely of
    # masked sentinels (its max equals the sentinel)
    rows, n = x.shape
    bad = False
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        if m == sentinel:
            bad = True
        acc = 0.0
        for j in range(n):
            e = np.exp(x[r, j] - m)
            y[r, j] = e
            acc += e
        for j in range(n):
            y[r, j] = y[r, j] / acc
    return bad



