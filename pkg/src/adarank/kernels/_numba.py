"""Numba-jitted kernels, semantically matched to ``_numpy``.

Compiled with fastmath OFF so IEEE-754 semantics (and therefore run-to-run
determinism) are preserved.  Loops are serial on purpose: parallel
reductions would make summation order scheduling-dependent.
"""

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(cache=True)
def gelu(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out.reshape(x.shape)


@njit(cache=True)
def gelu_vjp(x, g):
    xf = x.ravel()
    gf = g.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
        out[i] = gf[i] * (cdf + v * pdf)
    return out.reshape(x.shape)


@njit(cache=True)
def softmax(x):
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        row_max = x[i, 0]
        for j in range(1, d):
            if x[i, j] > row_max:
                row_max = x[i, j]
        total = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - row_max)
            out[i, j] = e
            total += e
        for j in range(d):
            out[i, j] /= total
    return out


@njit(cache=True)
def softmax_vjp(y, g):
    n, d = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * y[i, j]
        for j in range(d):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@njit(cache=True)
def layer_norm(x, gain, bias, eps):
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        istd = 1.0 / math.sqrt(var + eps)
        for j in range(d):
            out[i, j] = gain[j] * ((x[i, j] - mu) * istd) + bias[j]
    return out


@njit(cache=True)
def layer_norm_vjp(x, gain, g, eps):
    n, d = x.shape
    dx = np.empty_like(x)
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        istd = 1.0 / math.sqrt(var + eps)
        mean_dxhat = 0.0
        mean_dxhat_xhat = 0.0
        for j in range(d):
            xhat = (x[i, j] - mu) * istd
            dxhat = g[i, j] * gain[j]
            mean_dxhat += dxhat
            mean_dxhat_xhat += dxhat * xhat
            dgain[j] += g[i, j] * xhat
            dbias[j] += g[i, j]
        mean_dxhat /= d
        mean_dxhat_xhat /= d
        for j in range(d):
            xhat = (x[i, j] - mu) * istd
            dx[i, j] = istd * (g[i, j] * gain[j] - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


@njit(cache=True)
def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for i in range(param.size):
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] -= lr * mhat / (math.sqrt(vhat) + eps)
