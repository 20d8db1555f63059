"""Jump-process simulation by thinning, single and coupled.

Between events ages grow linearly; proposals arrive at the envelope rate
A = a_plus and a proposal at state s is accepted with probability p(s)/A,
in which case s -> (0, s_1, ..., s_{N-1}). The coupled process draws one
uniform U on [0, A) per proposal: U < min(p, p') moves both members, else
U < p moves the first only, else U < p' the second only.

Randomness is counter based (see ``rng``): particle m always consumes the
same numbers regardless of how the ensemble is split.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _backend
from ._backend import njit
from .errors import ArgumentError, DomainError, SpecContractError
from .grid import DensityField, GapGrid, fmt
from .model import RateSpec, tail_norm
from .rng import init_generator, stream_keys, uniform_open0, uniform_open0_np, uniform_open1, uniform_open1_np

try:
    from numba import prange
except ImportError:  # pragma: no cover
    prange = range

ENVELOPE_SLACK = 1e-12
PARTICLE_MAGIC = b"RNWP"
_PHEADER = struct.Struct("<4sIQd")
# counters for the second member of a pair live in a disjoint id range
_PAIR_OFFSET = 1 << 40


# rate evaluation ---------------------------------------------------------------

@njit
def _rate(s, w, b0, b1, lo, hi):
    p = 0.0
    for i in range(s.shape[0]):
        x = b0[i] + b1[i] * s[i]
        if x < lo[i]:
            x = lo[i]
        if x > hi[i]:
            x = hi[i]
        p = p + w[i] * x
    return p


@njit
def _renew(s):
    for i in range(s.shape[0] - 1, 0, -1):
        s[i] = s[i - 1]
    s[0] = 0.0


class _RateEval:
    """Batch rate evaluation matching the kernel's summation order."""

    def __init__(self, spec: RateSpec, N):
        self.spec = spec
        self.N = N
        self.parametric = spec.parametric(N)
        if self.parametric:
            self.coef = spec.coefficient_arrays(N)

    def __call__(self, s):
        p = np.zeros(s.shape[0])
        if self.parametric:
            w, b0, b1, lo, hi = self.coef
            for i in range(self.N):
                p = p + w[i] * np.clip(b0[i] + b1[i] * s[:, i], lo[i], hi[i])
        else:
            for i in range(1, self.N + 1):
                p = p + self.spec.component(i)(s)
        return p


# kernels -------------------------------------------------------------------------

@njit(parallel=True)
def _single_numba(ages0, keys, w, b0, b1, lo, hi, A, snaps, out, counts, flags):
    M, N = ages0.shape
    S = snaps.shape[0]
    for m in prange(M):
        s = ages0[m].copy()
        key = keys[m]
        ctr = 0
        t = 0.0
        nxt = t + (-math.log(uniform_open1(key, ctr)) / A)
        ctr += 1
        jumps = 0
        for k in range(S):
            T = snaps[k]
            while nxt <= T:
                dt = nxt - t
                for i in range(N):
                    s[i] += dt
                t = nxt
                u = uniform_open0(key, ctr)
                ctr += 1
                p = _rate(s, w, b0, b1, lo, hi)
                if p > A * (1.0 + 1e-12):
                    flags[m] = 1
                if u * A < p:
                    _renew(s)
                    jumps += 1
                nxt = t + (-math.log(uniform_open1(key, ctr)) / A)
                ctr += 1
            dt = T - t
            for i in range(N):
                s[i] += dt
            t = T
            for i in range(N):
                out[k, m, i] = s[i]
            counts[k, m] = jumps


@njit(parallel=True)
def _coupled_numba(x0, y0, keys, w, b0, b1, lo, hi, A, snaps, outx, outy, counts, flags):
    M, N = x0.shape
    S = snaps.shape[0]
    for m in prange(M):
        x = x0[m].copy()
        y = y0[m].copy()
        key = keys[m]
        ctr = 0
        t = 0.0
        nxt = t + (-math.log(uniform_open1(key, ctr)) / A)
        ctr += 1
        both = 0
        lone_x = 0
        lone_y = 0
        for k in range(S):
            T = snaps[k]
            while nxt <= T:
                dt = nxt - t
                for i in range(N):
                    x[i] += dt
                    y[i] += dt
                t = nxt
                U = uniform_open0(key, ctr) * A
                ctr += 1
                p = _rate(x, w, b0, b1, lo, hi)
                q = _rate(y, w, b0, b1, lo, hi)
                if p > A * (1.0 + 1e-12) or q > A * (1.0 + 1e-12):
                    flags[m] = 1
                if U < min(p, q):
                    _renew(x)
                    _renew(y)
                    both += 1
                elif U < p:
                    _renew(x)
                    lone_x += 1
                elif U < q:
                    _renew(y)
                    lone_y += 1
                nxt = t + (-math.log(uniform_open1(key, ctr)) / A)
                ctr += 1
            dt = T - t
            for i in range(N):
                x[i] += dt
                y[i] += dt
            t = T
            for i in range(N):
                outx[k, m, i] = x[i]
                outy[k, m, i] = y[i]
            counts[k, m, 0] = both
            counts[k, m, 1] = lone_x
            counts[k, m, 2] = lone_y


def _shift_rows(s, rows):
    if rows.size:
        s[rows, 1:] = s[rows, :-1]
        s[rows, 0] = 0.0


def _single_numpy(ages0, keys, rate, A, snaps, out, counts, flags):
    M, N = ages0.shape
    s = ages0.copy()
    t = np.zeros(M)
    ctr = np.zeros(M, dtype=np.uint64)
    nxt = t + (-np.log(uniform_open1_np(keys, ctr)) / A)
    ctr += np.uint64(1)
    jumps = np.zeros(M, dtype=np.int64)
    for k, T in enumerate(snaps):
        idx = np.flatnonzero(nxt <= T)
        while idx.size:
            s[idx] += (nxt[idx] - t[idx])[:, None]
            t[idx] = nxt[idx]
            u = uniform_open0_np(keys[idx], ctr[idx])
            ctr[idx] += np.uint64(1)
            p = rate(s[idx])
            flags[idx[p > A * (1.0 + 1e-12)]] = 1
            acc = idx[u * A < p]
            _shift_rows(s, acc)
            jumps[acc] += 1
            nxt[idx] = t[idx] + (-np.log(uniform_open1_np(keys[idx], ctr[idx])) / A)
            ctr[idx] += np.uint64(1)
            idx = idx[nxt[idx] <= T]
        s += (T - t)[:, None]
        t[:] = T
        out[k] = s
        counts[k] = jumps


def _coupled_numpy(x0, y0, keys, rate, A, snaps, outx, outy, counts, flags):
    M, N = x0.shape
    x = x0.copy()
    y = y0.copy()
    t = np.zeros(M)
    ctr = np.zeros(M, dtype=np.uint64)
    nxt = t + (-np.log(uniform_open1_np(keys, ctr)) / A)
    ctr += np.uint64(1)
    tally = np.zeros((M, 3), dtype=np.int64)
    for k, T in enumerate(snaps):
        idx = np.flatnonzero(nxt <= T)
        while idx.size:
            dt = (nxt[idx] - t[idx])[:, None]
            x[idx] += dt
            y[idx] += dt
            t[idx] = nxt[idx]
            U = uniform_open0_np(keys[idx], ctr[idx]) * A
            ctr[idx] += np.uint64(1)
            p = rate(x[idx])
            q = rate(y[idx])
            flags[idx[(p > A * (1.0 + 1e-12)) | (q > A * (1.0 + 1e-12))]] = 1
            sync = U < np.minimum(p, q)
            first = ~sync & (U < p)
            second = ~sync & ~first & (U < q)
            _shift_rows(x, idx[sync | first])
            _shift_rows(y, idx[sync | second])
            tally[idx[sync], 0] += 1
            tally[idx[first], 1] += 1
            tally[idx[second], 2] += 1
            nxt[idx] = t[idx] + (-np.log(uniform_open1_np(keys[idx], ctr[idx])) / A)
            ctr[idx] += np.uint64(1)
            idx = idx[nxt[idx] <= T]
        x += (T - t)[:, None]
        y += (T - t)[:, None]
        t[:] = T
        outx[k] = x
        outy[k] = y
        counts[k] = tally


# samplers ------------------------------------------------------------------------

def dirac_sampler(ages):
    ages = np.asarray(ages, dtype=float)

    def sample(rng, M, N):
        return np.broadcast_to(ages[:N], (M, N)).copy()

    return sample


def exponential_gaps_sampler(rate=1.0):
    def sample(rng, M, N):
        return np.cumsum(rng.exponential(1.0 / rate, size=(M, N)), axis=1)

    return sample


def uniform_gaps_sampler(lo=0.0, hi=1.0):
    def sample(rng, M, N):
        return np.cumsum(rng.uniform(lo, hi, size=(M, N)), axis=1)

    return sample


def independent_pair_sampler(first, second):
    def sample(rng, M, N):
        return first(rng, M, N), second(rng, M, N)

    return sample


def common_pair_sampler(base):
    def sample(rng, M, N):
        x = base(rng, M, N)
        return x, x.copy()

    return sample


def _checked_ages(a, M, N):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.shape != (M, N):
        raise ArgumentError(f"sampler returned shape {a.shape}, expected {(M, N)}")
    if np.any(a < 0) or np.any(np.diff(a, axis=1) < 0) or not np.all(np.isfinite(a)):
        raise DomainError("sampled ages must be nonnegative and nondecreasing")
    return a


# ensembles -------------------------------------------------------------------------

@dataclass
class Ensemble:
    N: int
    seed: int
    times: np.ndarray  # snapshot times, first entry 0
    states: np.ndarray  # (S, M, N)
    jumps: np.ndarray  # (S, M) cumulative renewals
    proposals_rate: float
    truncation_error: float

    @property
    def M(self):
        return self.states.shape[1]

    def at(self, t):
        k = _time_index(self.times, t)
        return self.states[k]


@dataclass
class CoupledEnsemble:
    N: int
    seed: int
    times: np.ndarray
    x: np.ndarray  # (S, M, N)
    y: np.ndarray
    counts: np.ndarray  # (S, M, 3): synchronous, first-only, second-only
    proposals_rate: float
    truncation_error: float

    @property
    def M(self):
        return self.x.shape[1]

    def at(self, t):
        k = _time_index(self.times, t)
        return self.x[k], self.y[k]


def _time_index(times, t):
    hits = np.flatnonzero(np.abs(np.asarray(times) - t) < 1e-9)
    if not hits.size:
        raise KeyError(f"no snapshot at t={t}")
    return int(hits[0])


def _prepare(spec, N, t_end, snapshot_times, backend):
    spec.check_range(N)
    snaps = sorted({float(t) for t in (snapshot_times or ())} | {float(t_end)})
    if snaps[0] < 0:
        raise ArgumentError("snapshot times must be nonnegative")
    if snaps[-1] > t_end + 1e-12:
        raise ArgumentError("snapshot beyond t_end")
    A = spec.bounds(N)[1]
    backend = _backend.resolve(backend)
    if backend == "numba" and not spec.parametric(N):
        backend = "numpy"
    eps = tail_norm(spec, N, spec.max_index) if spec.max_index > N else 0.0
    return np.array([s for s in snaps if s > 0.0]), A, backend, eps


def simulate(spec: RateSpec, N, M, t_end, init_sampler: Callable, seed=0, snapshot_times=None,
             backend=None) -> Ensemble:
    """Thinning simulation of M independent particles; snapshots include t=0."""
    snaps, A, backend, eps = _prepare(spec, N, t_end, snapshot_times, backend)
    ages0 = _checked_ages(init_sampler(init_generator(seed), M, N), M, N)
    keys = stream_keys(seed, np.arange(M))
    S = snaps.size
    out = np.empty((S, M, N))
    counts = np.zeros((S, M), dtype=np.int64)
    flags = np.zeros(M, dtype=np.int8)
    if backend == "numba":
        _single_numba(ages0, keys, *spec.coefficient_arrays(N), A, snaps, out, counts, flags)
    else:
        _single_numpy(ages0, keys, _RateEval(spec, N), A, snaps, out, counts, flags)
    if flags.any():
        raise SpecContractError(f"rate exceeded envelope a_plus={A} for {int(flags.sum())} particles")
    times = np.concatenate([[0.0], snaps])
    states = np.concatenate([ages0[None], out])
    jumps = np.concatenate([np.zeros((1, M), dtype=np.int64), counts])
    return Ensemble(N, seed, times, states, jumps, A, eps)


def simulate_coupled(spec: RateSpec, N, M, t_end, init_pair_sampler: Callable, seed=0,
                     snapshot_times=None, backend=None) -> CoupledEnsemble:
    """Coupled thinning of M pairs sharing one uniform per proposal."""
    snaps, A, backend, eps = _prepare(spec, N, t_end, snapshot_times, backend)
    x0, y0 = init_pair_sampler(init_generator(seed), M, N)
    x0 = _checked_ages(x0, M, N)
    y0 = _checked_ages(y0, M, N)
    keys = stream_keys(seed, np.arange(M) + _PAIR_OFFSET)
    S = snaps.size
    outx = np.empty((S, M, N))
    outy = np.empty((S, M, N))
    counts = np.zeros((S, M, 3), dtype=np.int64)
    flags = np.zeros(M, dtype=np.int8)
    if backend == "numba":
        _coupled_numba(x0, y0, keys, *spec.coefficient_arrays(N), A, snaps, outx, outy, counts, flags)
    else:
        _coupled_numpy(x0, y0, keys, _RateEval(spec, N), A, snaps, outx, outy, counts, flags)
    if flags.any():
        raise SpecContractError(f"rate exceeded envelope a_plus={A} for {int(flags.sum())} pairs")
    times = np.concatenate([[0.0], snaps])
    return CoupledEnsemble(
        N, seed, times,
        np.concatenate([x0[None], outx]),
        np.concatenate([y0[None], outy]),
        np.concatenate([np.zeros((1, M, 3), dtype=np.int64), counts]),
        A, eps,
    )


# statistics ---------------------------------------------------------------------

@dataclass(frozen=True)
class CostStat:
    mean: float
    std_error: float


def coupled_cost(cens: CoupledEnsemble, beta, a, t=None) -> CostStat:
    """Mean truncated weighted cost over pairs (default: last snapshot)."""
    from .transport import CostParams, cost_batch

    x, y = cens.at(cens.times[-1] if t is None else t)
    v = cost_batch(x, y, CostParams(beta, a, cens.N))
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return CostStat(float(v.mean()), se)


def empirical_marginal(states, K, grid: GapGrid) -> DensityField:
    """Histogram of the first K gaps, overflow cells absorbing the rest."""
    if isinstance(states, Ensemble):
        states = states.states[-1]
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if grid.N != K:
        raise ArgumentError(f"grid dimension {grid.N} != K={K}")
    if states.shape[1] < K:
        raise ArgumentError("states have fewer than K coordinates")
    gaps = np.diff(states[:, :K], axis=1, prepend=0.0)
    idx = np.minimum(np.floor(gaps / grid.h).astype(np.int64), grid.M - 1)
    flat = np.ravel_multi_index(tuple(idx.T), grid.shape)
    counts = np.bincount(flat, minlength=grid.size).astype(np.float64)
    return DensityField(grid, (counts / counts.sum()).reshape(grid.shape))


def jump_rates(ens: Ensemble, t=None):
    """Per-particle renewal rate over [0, t]."""
    k = len(ens.times) - 1 if t is None else _time_index(ens.times, t)
    return ens.jumps[k] / ens.times[k]


# persistence -------------------------------------------------------------------

def dump_states(path, states, t):
    states = np.ascontiguousarray(states, dtype="<f8")
    M, N = states.shape
    with open(path, "wb") as fh:
        fh.write(_PHEADER.pack(PARTICLE_MAGIC, N, M, float(t)))
        fh.write(states.tobytes(order="C"))


def load_states(path):
    with open(path, "rb") as fh:
        magic, N, M, t = _PHEADER.unpack(fh.read(_PHEADER.size))
        if magic != PARTICLE_MAGIC:
            raise ArgumentError(f"{path}: not a particle dump")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != M * N:
        raise ArgumentError(f"{path}: expected {M * N} values, found {data.size}")
    return data.reshape(M, N).astype(np.float64), t


def write_coupled_csv(path, cens: CoupledEnsemble, beta, a):
    """t, mean_cost, std_error, lone_jump_fraction, mean_jump_rate."""
    with open(path, "w") as fh:
        fh.write("t,mean_cost,std_error,lone_jump_fraction,mean_jump_rate\n")
        for k, t in enumerate(cens.times):
            st = coupled_cost(cens, beta, a, t)
            c = cens.counts[k].sum(axis=0)
            events = c.sum()
            lone = (c[1] + c[2]) / events if events else 0.0
            rate = (2 * c[0] + c[1] + c[2]) / (2 * cens.M * t) if t > 0 else 0.0
            fh.write(",".join(fmt(v) for v in (t, st.mean, st.std_error, lone, rate)) + "\n")
