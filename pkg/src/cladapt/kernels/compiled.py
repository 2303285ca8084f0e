"""Wrapper around the Cython extension, same surface as the numpy lane.

The extension works on C-contiguous float64 buffers; this module normalizes
shapes (batch flattening for matmul, row flattening for the elementwise
kernels) and copies non-contiguous inputs.
"""

import numpy as np

from . import _fast

_C = lambda a: np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2 and b.ndim == 2:
        return _fast.mm2d(_C(a), _C(b))
    if b.ndim == 2:
        # (..., m, k) @ (k, n): one gemm over the flattened rows
        lead = a.shape[:-1]
        out = _fast.mm2d(_C(a.reshape(-1, a.shape[-1])), _C(b))
        return out.reshape(lead + (b.shape[1],))
    if a.ndim == 2:
        lead = b.shape[:-2]
        out = _fast.bmm_shared_a(_C(a), _C(b.reshape(-1, b.shape[-2], b.shape[-1])))
        return out.reshape(lead + (a.shape[0], b.shape[-1]))
    if a.shape[:-2] == b.shape[:-2]:
        lead = a.shape[:-2]
        out = _fast.bmm(
            _C(a.reshape(-1, a.shape[-2], a.shape[-1])),
            _C(b.reshape(-1, b.shape[-2], b.shape[-1])),
        )
        return out.reshape(lead + (a.shape[-2], b.shape[-1]))
    # unequal broadcast batches never occur in this package
    return np.matmul(a, b)


def softmax(x2):
    return _fast.softmax(_C(x2))


def softmax_backward(y2, g2):
    return _fast.softmax_backward(_C(y2), _C(g2))


def layernorm(x2, gamma, beta, eps):
    return _fast.layernorm(_C(x2), _C(gamma), _C(beta), float(eps))


def layernorm_backward(x2, gamma, mu, rstd, g2):
    return _fast.layernorm_backward(_C(x2), _C(gamma), _C(mu), _C(rstd), _C(g2))


def sigmoid(x):
    return _fast.sigmoid(_C(x.ravel())).reshape(x.shape)


def gelu(x):
    return _fast.gelu(_C(x.ravel())).reshape(x.shape)


def gelu_backward(x, g):
    return _fast.gelu_backward(_C(x.ravel()), _C(g.ravel())).reshape(x.shape)
