# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: dense matmul, softmax and layernorm rows, activations.

All reductions accumulate sequentially in row-major order, so results are
bit-for-bit reproducible and independent of any BLAS blocking strategy.
"""

from libc.math cimport exp, log, sqrt, tanh

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double GELU_C = 0.7978845608028654   # sqrt(2/pi)
cdef double GELU_A = 0.044715


def mm2d(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, p, j
    cdef double aip
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]
    return out


def bmm(double[:, :, ::1] a, double[:, :, ::1] b):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2]
    out = np.zeros((nb, m, n), dtype=np.float64)
    cdef double[:, :, ::1] c = out
    cdef Py_ssize_t t, i, p, j
    cdef double aip
    for t in range(nb):
        for i in range(m):
            for p in range(k):
                aip = a[t, i, p]
                for j in range(n):
                    c[t, i, j] += aip * b[t, p, j]
    return out


def bmm_shared_b(double[:, :, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[1]
    out = np.zeros((nb, m, n), dtype=np.float64)
    cdef double[:, :, ::1] c = out
    cdef Py_ssize_t t, i, p, j
    cdef double aip
    for t in range(nb):
        for i in range(m):
            for p in range(k):
                aip = a[t, i, p]
                for j in range(n):
                    c[t, i, j] += aip * b[p, j]
    return out


def bmm_shared_a(double[:, ::1] a, double[:, :, ::1] b):
    cdef Py_ssize_t nb = b.shape[0], m = a.shape[0], k = a.shape[1], n = b.shape[2]
    out = np.zeros((nb, m, n), dtype=np.float64)
    cdef double[:, :, ::1] c = out
    cdef Py_ssize_t t, i, p, j
    cdef double aip
    for t in range(nb):
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    c[t, i, j] += aip * b[t, p, j]
    return out


def softmax(double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], n = x.shape[1]
    out = np.empty((r, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(r):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(n):
            y[i, j] /= s
    return out


def softmax_backward(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t r = y.shape[0], n = y.shape[1]
    out = np.empty((r, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(r):
        dot = 0.0
        for j in range(n):
            dot += y[i, j] * g[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layernorm(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    yo = np.empty((r, d), dtype=np.float64)
    mo = np.empty(r, dtype=np.float64)
    ro = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] y = yo
    cdef double[::1] mu = mo, rstd = ro
    cdef Py_ssize_t i, j
    cdef double m, v, xc, rs
    for i in range(r):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            xc = x[i, j] - m
            v += xc * xc
        v /= d
        rs = 1.0 / sqrt(v + eps)
        mu[i] = m
        rstd[i] = rs
        for j in range(d):
            y[i, j] = (x[i, j] - m) * rs * gamma[j] + beta[j]
    return yo, mo, ro


def layernorm_backward(double[:, ::1] x, double[::1] gamma, double[::1] mu,
                       double[::1] rstd, double[:, ::1] g):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    dxo = np.empty((r, d), dtype=np.float64)
    dgo = np.zeros(d, dtype=np.float64)
    dbo = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dxo
    cdef double[::1] dgamma = dgo, dbeta = dbo
    cdef Py_ssize_t i, j
    cdef double ga, gb, xh, gg, rs
    for i in range(r):
        rs = rstd[i]
        ga = 0.0
        gb = 0.0
        for j in range(d):
            xh = (x[i, j] - mu[i]) * rs
            gg = g[i, j] * gamma[j]
            ga += gg
            gb += gg * xh
        ga /= d
        gb /= d
        for j in range(d):
            xh = (x[i, j] - mu[i]) * rs
            dx[i, j] = (g[i, j] * gamma[j] - ga - xh * gb) * rs
            dgamma[j] += g[i, j] * xh
            dbeta[j] += g[i, j]
    return dxo, dgo, dbo


def sigmoid(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef Py_ssize_t i
    cdef double e
    for i in range(n):
        if x[i] >= 0:
            y[i] = 1.0 / (1.0 + exp(-x[i]))
        else:
            e = exp(x[i])
            y[i] = e / (1.0 + e)
    return out


def gelu(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_backward(double[::1] x, double[::1] g):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] d = out
    cdef Py_ssize_t i
    cdef double v, t, dinner
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        d[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out
