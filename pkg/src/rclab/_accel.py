"""JIT switch for the hot kernels.

Set ``RCLAB_PURE_NUMPY=1`` before import to run every kernel without numba.
Kernels that have a vectorised alternative (cluster labelling, the
Edwards-Sokal step) switch to it; the sequential ones run as plain Python.
"""

import os

_flag = os.environ.get("RCLAB_PURE_NUMPY", "0").strip().lower()
PURE_NUMPY = _flag not in ("", "0", "false", "no")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and not PURE_NUMPY


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when enabled, identity otherwise."""
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(func):
        return func

    return wrap


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
