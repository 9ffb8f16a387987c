"""Fused row-wise kernels for the hot elementwise ops (float64, numba)."""

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(cache=True)
def gelu_fwd(x):
    """Returns (gelu(x), d gelu / dx) for a flat array."""
    y = np.empty_like(x)
    d = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        y[i] = v * cdf
        d[i] = cdf + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v)
    return y, d


@njit(cache=True)
def layernorm_fwd(x, gamma, beta, eps):
    rows, n = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            c = x[r, j] - mu
            var += c * c
        var /= n
        s = 1.0 / math.sqrt(var + eps)
        inv[r] = s
        for j in range(n):
            h = (x[r, j] - mu) * s
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]
    return y, xhat, inv


@njit(cache=True)
def layernorm_bwd(g, xhat, inv, gamma):
    rows, n = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(n)
    dbeta = np.zeros(n)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gx = g[r, j] * gamma[j]
            m1 += gx
            m2 += gx * xhat[r, j]
            dgamma[j] += g[r, j] * xhat[r, j]
            dbeta[j] += g[r, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            dx[r, j] = inv[r] * (g[r, j] * gamma[j] - m1 - xhat[r, j] * m2)
    return dx, dgamma, dbeta


@njit(cache=True)
def softmax_rows(x):
    rows, n = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[r, j] - m)
            y[r, j] = e
            s += e
        for j in range(n):
            y[r, j] /= s
    return y


@njit(cache=True)
def softmax_rows_bwd(g, y):
    rows, n = g.shape
    dx = np.empty_like(g)
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        for j in range(n):
            dx[r, j] = y[r, j] * (g[r, j] - dot)
    return dx


@njit(cache=True)
def scatter_add_rows(out, idx, rows):
    for i in range(idx.size):
        k = idx[i]
        for j in range(rows.shape[1]):
            out[k, j] += rows[i, j]
    return out
