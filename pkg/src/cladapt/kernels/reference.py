"""NumPy lane for the hot kernels.

Same surface as the compiled lane; used as the fallback when the extension
is not built, or when ``CL_ADAPT_BACKEND=numpy`` forces it.  softmax and
layernorm operate on 2-d row matrices; matmul follows numpy broadcasting.
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def matmul(a, b):
    return np.matmul(a, b)


def softmax(x2):
    m = x2.max(axis=1, keepdims=True)
    e = np.exp(x2 - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y2, g2):
    dot = (y2 * g2).sum(axis=1, keepdims=True)
    return y2 * (g2 - dot)


def layernorm(x2, gamma, beta, eps):
    mu = x2.mean(axis=1)
    xc = x2 - mu[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mu, rstd


def layernorm_backward(x2, gamma, mu, rstd, g2):
    d = x2.shape[1]
    xh = (x2 - mu[:, None]) * rstd[:, None]
    gg = g2 * gamma
    ga = gg.sum(axis=1, keepdims=True) / d
    gb = (gg * xh).sum(axis=1, keepdims=True) / d
    dx = (gg - ga - xh * gb) * rstd[:, None]
    dgamma = (g2 * xh).sum(axis=0)
    dbeta = g2.sum(axis=0)
    return dx, dgamma, dbeta


def sigmoid(x):
    # split by sign so neither tail overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, g):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
