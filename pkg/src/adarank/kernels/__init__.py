"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``ADARANK_BACKEND``
environment variable (``numba`` or ``numpy``).  Unset, it defaults to
numba when importable and falls back to numpy otherwise.
``use_backend()`` rebinds the kernel functions at runtime, which is how
the benchmark and the parity tests drive both implementations in one
process.

Matrix multiplication is deliberately not listed here: both backends go
through BLAS via ``numpy.matmul``, which jitted loops cannot beat.
"""

import os

from . import _numpy

_KERNEL_NAMES = (
    "gelu",
    "gelu_vjp",
    "softmax",
    "softmax_vjp",
    "layer_norm",
    "layer_norm_vjp",
    "adam_update",
)

_BACKENDS = {"numpy": _numpy}
try:
    from . import _numba

    _BACKENDS["numba"] = _numba
except ImportError:  # numba not installed; numpy path still fully functional
    pass

active_backend = ""


def available_backends():
    return tuple(sorted(_BACKENDS))


def use_backend(name):
    """Bind this module's kernel functions to the named backend."""
    global active_backend
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {', '.join(available_backends())}"
        )
    module = _BACKENDS[name]
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(module, fn)
    active_backend = name


def _default_backend():
    requested = os.environ.get("ADARANK_BACKEND", "").strip().lower()
    if requested:
        return requested
    return "numba" if "numba" in _BACKENDS else "numpy"


use_backend(_default_backend())
