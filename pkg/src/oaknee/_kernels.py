"""Compiled inner loops for the memory-bound layers (channels-last arrays).

Reductions run in a fixed loop order with float64 accumulators, so results
do not depend on thread count.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col3x3(x, cols):
    n, h, w, c = x.shape
    for i in range(n):
        for r in range(h):
            for q in range(w):
                row = (i * h + r) * w + q
                for ki in range(3):
                    rr = r + ki - 1
                    for kj in range(3):
                        qq = q + kj - 1
                        base = (ki * 3 + kj) * c
                        if rr < 0 or rr >= h or qq < 0 or qq >= w:
                            for k in range(c):
                                cols[row, base + k] = 0
                        else:
                            for k in range(c):
                                cols[row, base + k] = x[i, rr, qq, k]


@njit(cache=True)
def col2im3x3(dcols, dx):
    n, h, w, c = dx.shape
    dx[:] = 0
    for i in range(n):
        for r in range(h):
            for q in range(w):
                row = (i * h + r) * w + q
                for ki in range(3):
                    rr = r + ki - 1
                    if rr < 0 or rr >= h:
                        continue
                    for kj in range(3):
                        qq = q + kj - 1
                        if qq < 0 or qq >= w:
                            continue
                        base = (ki * 3 + kj) * c
                        for k in range(c):
                            dx[i, rr, qq, k] += dcols[row, base + k]


@njit(cache=True)
def bn_train_forward(x2, gamma, beta, out, xhat, mean, var, eps):
    m, c = x2.shape
    acc = np.zeros(c)
    for i in range(m):
        for k in range(c):
            acc[k] += x2[i, k]
    for k in range(c):
        mean[k] = acc[k] / m
        acc[k] = 0.0
    for i in range(m):
        for k in range(c):
            d = x2[i, k] - mean[k]
            acc[k] += d * d
    inv = np.empty(c, dtype=x2.dtype)
    for k in range(c):
        var[k] = acc[k] / m
        inv[k] = 1.0 / np.sqrt(var[k] + eps)
    for i in range(m):
        for k in range(c):
            xh = (x2[i, k] - mean[k]) * inv[k]
            xhat[i, k] = xh
            out[i, k] = xh * gamma[k] + beta[k]
    return inv


@njit(cache=True)
def bn_train_backward(d2, xhat, gamma, inv, dx, dgamma, dbeta):
    m, c = d2.shape
    sb = np.zeros(c)
    sg = np.zeros(c)
    for i in range(m):
        for k in range(c):
            sb[k] += d2[i, k]
            sg[k] += d2[i, k] * xhat[i, k]
    for k in range(c):
        dbeta[k] = sb[k]
        dgamma[k] = sg[k]
        sb[k] /= m
        sg[k] /= m
    for i in range(m):
        for k in range(c):
            dx[i, k] = (d2[i, k] - sb[k] - xhat[i, k] * sg[k]) * (gamma[k] * inv[k])


@njit(cache=True)
def maxpool_forward(x, out, route):
    n, h, w, c = x.shape
    for i in range(n):
        for r in range(h // 2):
            for q in range(w // 2):
                for k in range(c):
                    best = x[i, 2 * r, 2 * q, k]
                    idx = 0
                    v = x[i, 2 * r, 2 * q + 1, k]
                    if v > best:
                        best = v
                        idx = 1
                    v = x[i, 2 * r + 1, 2 * q, k]
                    if v > best:
                        best = v
                        idx = 2
                    v = x[i, 2 * r + 1, 2 * q + 1, k]
                    if v > best:
                        best = v
                        idx = 3
                    out[i, r, q, k] = best
                    route[i, r, q, k] = idx


@njit(cache=True)
def maxpool_backward(dout, route, dx):
    n, h2, w2, c = dout.shape
    dx[:] = 0
    for i in range(n):
        for r in range(h2):
            for q in range(w2):
                for k in range(c):
                    idx = route[i, r, q, k]
                    dx[i, 2 * r + idx // 2, 2 * q + idx % 2, k] = dout[i, r, q, k]
