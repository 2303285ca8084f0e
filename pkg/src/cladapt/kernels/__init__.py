"""Numeric kernels with two interchangeable backends.

``CL_ADAPT_BACKEND`` picks the lane:

* ``auto`` (default): the compiled extension when it imported, numpy otherwise
* ``compiled``: require the extension, raise if it is missing
* ``numpy``: force the pure-numpy reference lane

Both lanes share one function surface (matmul, softmax, layernorm, sigmoid,
gelu plus their backward passes) and agree to float rounding; within a lane
results are bitwise reproducible run to run.
"""

import os

from . import reference

_choice = os.environ.get("CL_ADAPT_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(
        "CL_ADAPT_BACKEND must be one of auto/compiled/numpy, got %r" % _choice
    )

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import compiled as _impl
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "CL_ADAPT_BACKEND=compiled but the cladapt extension is not "
                "built; install with `pip install -e . --no-build-isolation` "
                "or set CL_ADAPT_BACKEND=numpy"
            )
        _impl = None

if _impl is None:
    _impl = reference
    BACKEND = "numpy"
else:
    BACKEND = "compiled"

matmul = _impl.matmul
softmax = _impl.softmax
softmax_backward = _impl.softmax_backward
layernorm = _impl.layernorm
layernorm_backward = _impl.layernorm_backward
sigmoid = _impl.sigmoid
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward

__all__ = [
    "BACKEND",
    "matmul",
    "softmax",
    "softmax_backward",
    "layernorm",
    "layernorm_backward",
    "sigmoid",
    "gelu",
    "gelu_backward",
]
