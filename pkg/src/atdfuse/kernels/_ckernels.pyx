# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused row kernels; same contracts as ``_pykernels``."""
import numpy as np
from libc.math cimport exp, tanh, sqrt

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(n):
            y[i, j] /= s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def gelu(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef double v
    for i in range(n):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_backward(const double[::1] x, const double[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] dx = out
    cdef double v, t
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        dx[i] = g[i] * (0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out


def layernorm_rows(const double[:, ::1] x, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    rstd_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        r = 1.0 / sqrt(var / n + eps)
        rstd[i] = r
        for j in range(n):
            y[i, j] = (x[i, j] - mu) * r
    return out, rstd_arr


def layernorm_rows_backward(const double[:, ::1] xhat, const double[::1] rstd,
                            const double[:, ::1] g):
    cdef Py_ssize_t m = xhat.shape[0], n = xhat.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double gm, gx
    for i in range(m):
        gm = 0.0
        gx = 0.0
        for j in range(n):
            gm += g[i, j]
            gx += g[i, j] * xhat[i, j]
        gm /= n
        gx /= n
        for j in range(n):
            dx[i, j] = rstd[i] * (g[i, j] - gm - xhat[i, j] * gx)
    return out
