"""JIT switch for the numeric kernels.

Kernels are decorated with :func:`njit`.  When numba is importable and the
environment variable ``ABCFOREST_NO_NUMBA`` is unset (or ``0``), they are
compiled in nopython mode; otherwise the same functions run as plain
Python/numpy.  Compiled kernels keep the uncompiled body on ``.py_func``.
"""
import os

_flag = os.environ.get("ABCFOREST_NO_NUMBA", "0").strip().lower()
NUMBA_DISABLED = _flag not in ("", "0", "false", "no")

try:
    import numba as _numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency here
    _numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not NUMBA_DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity otherwise."""
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        fn = args[0]
        fn.py_func = fn
        return fn

    def deco(fn):
        fn.py_func = fn
        return fn

    return deco


def python_impl(fn):
    """Return the pure-Python body of a (possibly compiled) kernel."""
    return getattr(fn, "py_func", fn)
