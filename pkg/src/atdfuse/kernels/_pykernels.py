"""Numpy reference versions of the fused row kernels.

Every function takes C-contiguous float64 arrays; the row functions expect
2-D input and operate along the last axis.
"""
import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def gelu_backward(x, g):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def layernorm_rows(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0].copy()


def layernorm_rows_backward(xhat, rstd, g):
    n = xhat.shape[1]
    gm = g.sum(axis=1, keepdims=True) / n
    gx = (g * xhat).sum(axis=1, keepdims=True) / n
    return rstd[:, None] * (g - gm - xhat * gx)
