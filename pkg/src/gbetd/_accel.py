"""Backend selection for the hot kernels.

Kernels come in two flavours: a numba ``@njit`` loop and a pure-numpy
fallback. The numba path is used when numba imports and the environment
variable ``GBETD_DISABLE_NUMBA`` is unset (or ``0``). Tests and benchmarks
may switch at runtime with :func:`set_backend`.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("GBETD_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")
_backend = "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn


def backend():
    return _backend


def use_numba():
    return _backend == "numba"


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    return prev
