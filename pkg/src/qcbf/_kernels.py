"""Compiled inner loops for grid value iteration."""

import numba
import numpy as np
from numba import njit, prange

numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@njit(cache=True, inline="always")
def _lerp(a, b, t):
    if t == 1.0:
        return b
    return a + t * (b - a)


@njit(cache=True, inline="always")
def _interp(values, base, frac, strides, corner_bits):
    """Nested linear interpolation; exact on constants and at nodes."""
    n_corners, ndim = corner_bits.shape
    if ndim == 2:
        s0 = strides[0]
        s1 = strides[1]
        lo = _lerp(values[base], values[base + s1], frac[1])
        hi = _lerp(values[base + s0], values[base + s0 + s1], frac[1])
        return _lerp(lo, hi, frac[0])
    buf = np.empty(n_corners)
    for c in range(n_corners):
        off = base
        for k in range(ndim):
            if corner_bits[c, k]:
                off += strides[k]
        buf[c] = values[off]
    width = n_corners
    for k in range(ndim - 1, -1, -1):
        width //= 2
        for m in range(width):
            buf[m] = _lerp(buf[2 * m], buf[2 * m + 1], frac[k])
    return buf[0]


@njit(cache=True, parallel=True)
def sweep(values, margin, base, frac, strides, corner_bits, warm_u, warm_d, gamma, discounted):
    """One Jacobi sweep of the (optionally discounted) Isaacs backup.

    ``base``/``frac`` are the precomputed successor cells of every (node, u, d).
    Pruning never changes the returned values: a control is abandoned only
    once its running minimum cannot beat the best control found so far.
    """
    n_nodes, n_u, n_d = base.shape
    out = np.empty(n_nodes)
    new_warm_u = np.empty(n_nodes, dtype=np.int64)
    new_warm_d = np.empty(n_nodes, dtype=np.int64)
    for i in prange(n_nodes):
        g = margin[i]
        best = -np.inf
        best_u = warm_u[i]
        best_d = warm_d[i]
        for a in range(n_u):
            j = (warm_u[i] + a) % n_u
            inner = np.inf
            inner_d = 0
            for b in range(n_d):
                l = (warm_d[i] + b) % n_d
                v = _interp(values, base[i, j, l], frac[i, j, l], strides, corner_bits)
                if v < inner:
                    inner = v
                    inner_d = l
                if inner <= best:
                    break
            if inner > best:
                best = inner
                best_u = j
                best_d = inner_d
            if best >= g:
                break
        game = min(g, best)
        if discounted:
            out[i] = (1.0 - gamma) * g + gamma * game
        else:
            out[i] = game
        new_warm_u[i] = best_u
        new_warm_d[i] = best_d
    return out, new_warm_u, new_warm_d


@njit(cache=True, parallel=True)
def inner_game(values, base, frac, strides, corner_bits):
    """Full ``(node, u) -> min_d V(successor)`` table, no pruning."""
    n_nodes, n_u, n_d = base.shape
    out = np.empty((n_nodes, n_u))
    for i in prange(n_nodes):
        for j in range(n_u):
            inner = np.inf
            for l in range(n_d):
                v = _interp(values, base[i, j, l], frac[i, j, l], strides, corner_bits)
                if v < inner:
                    inner = v
            out[i, j] = inner
    return out
