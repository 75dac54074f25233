"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_numba`` with identical
semantics.  Inputs are float64 and C-contiguous; row-wise kernels take a
2-D view whose rows are the normalization groups.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_vjp(x, g):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def softmax(x):
    """Row-wise softmax of a 2-D array, max-shifted for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vjp(y, g):
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def layer_norm(x, gain, bias, eps):
    """Row-wise layer norm: normalize to zero mean / unit variance, then affine."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return gain * xhat + bias


def layer_norm_vjp(x, gain, g, eps):
    """Returns (dx, dgain, dbias); statistics are recomputed from x."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    dxhat = g * gain
    dx = istd * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
    )
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    return dx, dgain, dbias


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    """In-place Adam step with bias correction; t is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
