"""Compiled loops for the per-edge hot paths; NumPy would need several passes."""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def max_mid(x):
    m, k, w = x.shape
    out = np.empty((m, w))
    arg = np.zeros((m, w), np.int64)
    for i in range(m):
        for c in range(w):
            out[i, c] = x[i, 0, c]
        for j in range(1, k):
            for c in range(w):
                v = x[i, j, c]
                if v > out[i, c]:
                    out[i, c] = v
                    arg[i, c] = j
    return out, arg


@numba.njit(cache=True)
def max_mid_backward(g, arg, k):
    m, w = g.shape
    out = np.zeros((m, k, w))
    for i in range(m):
        for c in range(w):
            out[i, arg[i, c], c] = g[i, c]
    return out


@numba.njit(cache=True)
def leaky(x, slope):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = v if v > 0 else slope * v
    return out.reshape(x.shape)


@numba.njit(cache=True)
def leaky_backward(g, out, slope):
    gf = g.ravel()
    of = out.ravel()
    res = np.empty_like(gf)
    for i in range(gf.size):
        res[i] = gf[i] if of[i] > 0 else slope * gf[i]
    return res.reshape(g.shape)


@numba.njit(cache=True)
def gather_add(centre, nbr, idx):
    m, k = idx.shape
    w = centre.shape[1]
    out = np.empty((m, k, w))
    for i in range(m):
        for j in range(k):
            r = idx[i, j]
            for c in range(w):
                out[i, j, c] = nbr[r, c] + centre[i, c]
    return out


@numba.njit(cache=True)
def gather_add_backward(g, idx, n):
    m, k, w = g.shape
    d_centre = np.zeros((m, w))
    d_nbr = np.zeros((n, w))
    for i in range(m):
        for j in range(k):
            r = idx[i, j]
            for c in range(w):
                v = g[i, j, c]
                d_centre[i, c] += v
                d_nbr[r, c] += v
    return d_centre, d_nbr


@numba.njit(cache=True)
def scatter_add_rows(idx, vals, n):
    w = vals.shape[1]
    out = np.zeros((n, w))
    for e in range(idx.size):
        r = idx[e]
        for c in range(w):
            out[r, c] += vals[e, c]
    return out


@numba.njit(cache=True)
def select_k_smallest(d, kth, k):
    """Per row: the ``k`` smallest entries, ties at the boundary to lower
    columns, ordered by (value, column)."""
    m, n = d.shape
    out = np.empty((m, k), np.int64)
    for i in range(m):
        t = kth[i]
        cnt = 0
        for j in range(n):
            if d[i, j] < t:
                out[i, cnt] = j
                cnt += 1
        for j in range(n):
            if cnt == k:
                break
            if d[i, j] == t:
                out[i, cnt] = j
                cnt += 1
        # insertion sort by (distance, index); candidates arrive index-sorted
        for a in range(1, k):
            key = out[i, a]
            kd = d[i, key]
            b = a - 1
            while b >= 0 and (d[i, out[i, b]] > kd or (d[i, out[i, b]] == kd and out[i, b] > key)):
                out[i, b + 1] = out[i, b]
                b -= 1
            out[i, b + 1] = key
    return out
