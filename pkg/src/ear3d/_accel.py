"""Backend switch for the hot numeric kernels.

Kernels in :mod:`ear3d.kernels` come in two flavours: a numba ``@njit`` loop
and a vectorised numpy fallback.  ``EAR3D_BACKEND=numpy`` (or
``EAR3D_DISABLE_NUMBA=1``) selects the fallback at import time; the active
choice can also be flipped at runtime with :func:`set_backend`, which is what
the benchmark and the equivalence tests do.
"""
from __future__ import annotations

import os

try:
    import numba
    from numba import prange
    HAVE_NUMBA = True
    # the TBB layer probes an often-outdated system TBB and warns; parallel
    # kernels here only need a plain fork-join pool
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    prange = range
    HAVE_NUMBA = False


def _initial_backend() -> str:
    if os.environ.get("EAR3D_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return "numpy"
    choice = os.environ.get("EAR3D_BACKEND", "numba").strip().lower()
    if choice not in ("numba", "numpy"):
        raise ValueError(f"EAR3D_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numba" and not HAVE_NUMBA:
        return "numpy"
    return choice


_backend = _initial_backend()


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f


def backend() -> str:
    return _backend


def use_numba() -> bool:
    return _backend == "numba"


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    return prev
