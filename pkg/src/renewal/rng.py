"""Counter-based random streams, identical in numba and numpy.

Each particle owns a stream key derived from (seed, particle id); draw ``k``
of that stream is a splitmix64 finalizer applied to ``key + k * GOLDEN``.
Draws depend only on (seed, particle id, counter), so splitting an ensemble
across workers never changes the numbers a particle sees.
"""
import numpy as np

from ._backend import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


@njit
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit
def uniform_open0(key, counter):
    """Uniform on [0, 1)."""
    z = mix64(key + np.uint64(counter) * GOLDEN)
    return float(z >> _S11) * _INV53


@njit
def uniform_open1(key, counter):
    """Uniform on (0, 1]; safe inside a logarithm."""
    z = mix64(key + np.uint64(counter) * GOLDEN)
    return float((z >> _S11) + _ONE) * _INV53


def _mix64_np(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def stream_keys(seed, ids):
    """Per-particle stream keys for integer ids."""
    ids = np.asarray(ids, dtype=np.uint64)
    base = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        return _mix64_np(base + (ids + _ONE) * GOLDEN)


def uniform_open0_np(keys, counters):
    with np.errstate(over="ignore"):
        z = _mix64_np(keys + np.asarray(counters, dtype=np.uint64) * GOLDEN)
    return (z >> _S11).astype(np.float64) * _INV53


def uniform_open1_np(keys, counters):
    with np.errstate(over="ignore"):
        z = _mix64_np(keys + np.asarray(counters, dtype=np.uint64) * GOLDEN)
    return ((z >> _S11) + _ONE).astype(np.float64) * _INV53


def init_generator(seed, salt=0):
    """numpy Generator for initial-state samplers, independent of the jump streams."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, 0x5EED0000 + salt]))
