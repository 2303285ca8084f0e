"""Reverse-mode autodiff on float64 numpy arrays.

A single module-level tape records every operation whose output needs a
gradient. ``backward`` replays the tape once in reverse, accumulates into
``.grad`` buffers in a fixed order, then frees the tape. Accumulation order
never depends on timing or hashing, so gradients are bitwise reproducible
for a given backend lane.
"""

import numpy as np

from . import kernels


class TapeError(RuntimeError):
    """Backward was asked to walk a tape that is no longer alive."""


class ShapeError(ValueError):
    """Operands cannot be combined; the message names both shapes."""


_DEBUG_CHECKS = False


def set_debug_checks(flag):
    """Toggle per-op finiteness checks (off by default, costs a pass per op)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


class _Tape:
    def __init__(self):
        self.nodes = []
        self.generation = 0
        self.recording = True


_TAPE = _Tape()


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._saved = _TAPE.recording
        _TAPE.recording = False
        return self

    def __exit__(self, *exc):
        _TAPE.recording = self._saved
        return False


def _as_array(data):
    return np.asarray(data, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_gen")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_gen = _TAPE.generation

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return "Tensor(shape=%s%s)" % (self.data.shape, flag)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # shape ----------------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    # reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Named leaf tensor; ``frozen`` excludes it from both grads and SGD."""

    __slots__ = ("name", "_frozen")

    def __init__(self, data, name, frozen=False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, flag):
        self._frozen = bool(flag)
        self.requires_grad = not self._frozen

    def assign(self, data):
        arr = _as_array(data)
        if arr.shape != self.data.shape:
            raise ShapeError(
                "cannot assign shape %s to parameter %r of shape %s"
                % (arr.shape, self.name, self.data.shape)
            )
        self.data = arr.copy()
        self.grad = None

    def __repr__(self):
        tag = "frozen" if self._frozen else "trainable"
        return "Parameter(%r, shape=%s, %s)" % (self.name, self.data.shape, tag)


def _record(out, pairs):
    """Attach backward closures for the inputs that need gradients."""
    live = [(t, fn) for t, fn in pairs if t.requires_grad]
    if _TAPE.recording and live:
        out.requires_grad = True
        _TAPE.nodes.append((out, live))
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in op output")
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def mul(a, b):
    a = _coerce(a)
    if not isinstance(b, Tensor):
        s = float(b)
        out = Tensor(a.data * s)
        return _record(out, [(a, lambda g: g * s)])
    out = Tensor(a.data * b.data)
    return _record(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    inner_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if ad.shape[-1] != inner_b:
        raise ShapeError("matmul mismatch: %s @ %s" % (ad.shape, bd.shape))

    if ad.ndim == 1 and bd.ndim >= 2:
        out = Tensor(np.matmul(ad, bd))
        return _record(
            out,
            [
                (a, lambda g: _rows(np.matmul(bd, g[..., None])[..., 0]).sum(axis=0)
                    if bd.ndim > 2 else np.matmul(bd, g)),
                (b, lambda g: _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)),
            ],
        )
    if bd.ndim == 1:
        out = Tensor(np.matmul(ad, bd))
        if ad.ndim == 1:
            pairs = [(a, lambda g: g * bd), (b, lambda g: g * ad)]
        else:
            pairs = [
                (a, lambda g: g[..., None] * bd),
                (b, lambda g: ad.reshape(-1, ad.shape[-1]).T @ g.ravel()),
            ]
        return _record(out, pairs)

    out = Tensor(kernels.matmul(ad, bd))

    def grad_a(g):
        da = kernels.matmul(g, _swap_last(bd))
        return _unbroadcast(da, ad.shape)

    def grad_b(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # shared right operand: fold all leading axes into one gemm
            return kernels.matmul(_rows(ad).T, _rows(g))
        db = kernels.matmul(_swap_last(ad), g)
        return _unbroadcast(db, bd.shape)

    return _record(out, [(a, grad_a), (b, grad_b)])


def _swap_last(arr):
    return np.swapaxes(arr, -1, -2)


def transpose(x, axes=None):
    x = _coerce(x)
    if axes is None:
        if x.data.ndim < 2:
            raise ShapeError("transpose needs at least 2 dims, got %s" % (x.data.shape,))
        perm = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    else:
        perm = tuple(axes)
    inv = tuple(np.argsort(perm))
    out = Tensor(np.transpose(x.data, perm))
    return _record(out, [(x, lambda g: np.transpose(g, inv))])


def reshape(x, shape):
    x = _coerce(x)
    orig = x.data.shape
    out = Tensor(x.data.reshape(shape))
    return _record(out, [(x, lambda g: g.reshape(orig))])


def getitem(x, idx):
    x = _coerce(x)
    out = Tensor(np.array(x.data[idx]))

    def grad(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        return buf

    return _record(out, [(x, grad)])


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    pairs = []
    for i, t in enumerate(tensors):
        def grad(g, i=i):
            return np.split(g, sizes, axis=axis)[i]
        pairs.append((t, grad))
    return _record(out, pairs)


def stack(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    pairs = []
    for i, t in enumerate(tensors):
        def grad(g, i=i):
            return np.take(g, i, axis=axis)
        pairs.append((t, grad))
    return _record(out, pairs)


def tsum(x, axis=None, keepdims=False):
    x = _coerce(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, x.data.shape).copy()

    return _record(out, [(x, grad)])


def tmean(x, axis=None, keepdims=False):
    x = _coerce(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused nonlinear ops backed by the kernel lane


def _rows(arr):
    return arr.reshape(-1, arr.shape[-1])


def softmax(x, axis=-1):
    x = _coerce(x)
    if axis not in (-1, x.data.ndim - 1):
        moved = np.moveaxis(x.data, axis, -1)
    else:
        moved = x.data
    y = kernels.softmax(np.ascontiguousarray(_rows(moved))).reshape(moved.shape)
    if axis not in (-1, x.data.ndim - 1):
        y_out = np.moveaxis(y, -1, axis)
    else:
        y_out = y
    out = Tensor(y_out)

    def grad(g):
        if axis not in (-1, x.data.ndim - 1):
            gm = np.moveaxis(g, axis, -1)
        else:
            gm = g
        dx = kernels.softmax_backward(
            np.ascontiguousarray(_rows(y)), np.ascontiguousarray(_rows(gm))
        ).reshape(moved.shape)
        if axis not in (-1, x.data.ndim - 1):
            dx = np.moveaxis(dx, -1, axis)
        return dx

    return _record(out, [(x, grad)])


def layer_norm(x, gamma, beta, eps=1e-6):
    x = _coerce(x)
    gamma, beta = _coerce(gamma), _coerce(beta)
    if gamma.data.shape != (x.data.shape[-1],) or beta.data.shape != gamma.data.shape:
        raise ShapeError(
            "layer_norm scale/shift %s/%s do not match feature dim of %s"
            % (gamma.data.shape, beta.data.shape, x.data.shape)
        )
    x2 = np.ascontiguousarray(_rows(x.data))
    y, mu, rstd = kernels.layernorm(x2, gamma.data, beta.data, eps)
    out = Tensor(y.reshape(x.data.shape))
    cache = {}

    def _bwd(g):
        if "res" not in cache:
            cache["res"] = kernels.layernorm_backward(
                x2, gamma.data, mu, rstd, np.ascontiguousarray(_rows(g))
            )
        return cache["res"]

    def grad_x(g):
        return _bwd(g)[0].reshape(x.data.shape)

    def grad_gamma(g):
        return _bwd(g)[1]

    def grad_beta(g):
        return _bwd(g)[2]

    return _record(out, [(x, grad_x), (gamma, grad_gamma), (beta, grad_beta)])


def sigmoid(x):
    x = _coerce(x)
    y = kernels.sigmoid(x.data)
    out = Tensor(y)
    return _record(out, [(x, lambda g: g * (y * (1.0 - y)))])


def gelu(x):
    x = _coerce(x)
    out = Tensor(kernels.gelu(x.data))
    return _record(out, [(x, lambda g: kernels.gelu_backward(x.data, g))])


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of 2-d ``logits`` against integer labels."""
    logits = _coerce(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects (n, classes), got %s" % (logits.data.shape,))
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.data.shape[0]
    if labels.shape != (n,):
        raise ShapeError(
            "labels shape %s does not match %d logit rows" % (labels.shape, n)
        )
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = Tensor((lse - picked).mean())

    def grad(g):
        probs = kernels.softmax(np.ascontiguousarray(z))
        probs[np.arange(n), labels] -= 1.0
        return probs * (float(g) / n)

    return _record(out, [(logits, grad)])


# ---------------------------------------------------------------------------


def backward(loss):
    """Reverse sweep from a scalar loss; frees the tape afterwards."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar, got shape %s" % (loss.data.shape,))
    if loss.tape_gen != _TAPE.generation:
        raise TapeError("this tensor's tape has already been freed")
    loss.grad = np.ones_like(loss.data)
    for out, pairs in reversed(_TAPE.nodes):
        g = out.grad
        if g is None:
            continue
        for inp, fn in pairs:
            piece = fn(g)
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += piece
    _TAPE.nodes = []
    _TAPE.generation += 1
