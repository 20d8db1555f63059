"""Kernel backend selection.

Hot loops exist twice: a numba ``@njit`` kernel and a vectorized numpy
fallback. ``RENEWAL_BACKEND=numpy`` forces the fallback; the default uses
numba when it imports.
"""
import os

try:
    import numba

    HAS_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # Old TBB installs warn on every parallel launch; prefer OpenMP.
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

BACKENDS = ("numba", "numpy")

_JIT_KWARGS = {"cache": True, "nogil": True}


def njit(*args, **kwargs):
    """``numba.njit`` with project defaults, or identity when numba is missing."""
    opts = dict(_JIT_KWARGS)
    opts.update(kwargs)
    if not HAS_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    if args and callable(args[0]):
        return numba.njit(**opts)(args[0])
    return numba.njit(*args, **opts)


def default_backend():
    name = os.environ.get("RENEWAL_BACKEND", "").strip().lower()
    if name == "numpy" or not HAS_NUMBA:
        return "numpy"
    if name in ("", "numba"):
        return "numba"
    raise ValueError(f"RENEWAL_BACKEND must be one of {BACKENDS}, got {name!r}")


def resolve(backend=None):
    if backend is None:
        return default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        return "numpy"
    return backend


def set_threads(n):
    """Apply a thread count to numba; returns the count actually used."""
    if n is None:
        env = os.environ.get("RENEWAL_THREADS")
        n = int(env) if env else None
    if n is None or not HAS_NUMBA:
        return n
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
