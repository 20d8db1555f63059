"""Time stepping of the N-times renewal equation on a gap grid.

With dt = h, advection is an exact shift by one cell along u_1. Decay is
integrated exactly for a hazard frozen over the step, and the mass removed
from each cell is reinjected at the u_1 = 0 slice at the renewal image
(0, u_1, ..., u_{N-1}). In flattened row-major storage the renewal image of
cell (j_1..j_{N-1}, j_N) is simply flat index ``q = ravel(j_1..j_{N-1})``,
which is what both kernels below exploit.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from . import _backend
from ._backend import njit
from .errors import ArgumentError, ConfigError
from .grid import (
    DensityField,
    GapGrid,
    fmt,
    init_density,
    l1_distance,
    marginal,
    rate_table,
    sigma_moment,
)
from .model import RateSpec, tail_norm, truncate

try:
    from numba import prange
except ImportError:  # pragma: no cover
    prange = range


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    t_end: float = 0.0
    snapshot_times: tuple = ()
    steady_tol: float = 1e-9
    steady_max_time: float = 400.0
    record_every: int = 1
    grid: Optional[GapGrid] = None

    def __post_init__(self):
        if not self.dt > 0 or self.t_end < 0:
            raise ConfigError("need dt > 0 and t_end >= 0")
        if self.grid is not None:
            check_dt(self.grid, self.dt)
        snaps = tuple(float(t) for t in self.snapshot_times)
        if list(snaps) != sorted(snaps):
            raise ConfigError("snapshot_times must be sorted")
        for t in snaps:
            k = t / self.dt
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ConfigError(f"snapshot time {t} is not a multiple of dt={self.dt}")
        object.__setattr__(self, "snapshot_times", snaps)
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1")

    @property
    def n_steps(self):
        return int(math.floor(self.t_end / self.dt + 1e-9))


def check_dt(grid: GapGrid, dt):
    if abs(dt - grid.h) > 1e-12 * grid.h:
        raise ConfigError(f"time step must equal the cell width (dt = h): dt={dt}, h={grid.h}")


# kernels ---------------------------------------------------------------------

@njit(parallel=True)
def _step_numba(f, E, boost, M, out):
    n = f.size
    R = n // M
    split = (M - 1) * R
    inj = np.empty(R)
    last = np.empty(R)
    # Decay each cell and write the kept mass one cell further along u_1;
    # the reinjection for renewal image q sums the contiguous block q*M..q*M+M-1.
    for q in prange(R):
        acc = 0.0
        base = q * M
        for j in range(M):
            idx = base + j
            v = f[idx]
            k = v * E[idx]
            if idx < split:
                out[idx + R] = k
            else:
                last[idx - split] = k
            acc += (v - k) + boost * v
        inj[q] = acc
    for r in prange(R):
        out[split + r] = out[split + r] + last[r]
        out[r] = inj[r]
    return out


def _step_numpy(f, E, boost, M, out):
    n = f.size
    R = n // M
    kept = f * E
    rem = f - kept
    if boost:
        rem = rem + boost * f
    inj = rem.reshape(R, M).sum(axis=1)
    k2 = kept.reshape(M, R)
    o2 = out.reshape(M, R)
    o2[M - 1] = k2[M - 2] + k2[M - 1]
    o2[1 : M - 1] = k2[0 : M - 2]
    o2[0] = inj
    return out


class Stepper:
    """Precomputed decay table for repeated steps of one (spec, grid).

    The hazard is evaluated at mid-step ages: cell centers advanced by h/2,
    i.e. u_1 at the cell's right edge. ``boost`` adds boost * mass to the
    reinjection (growth system with inflated boundary weight).
    """

    def __init__(self, spec: RateSpec, grid: GapGrid, dt=None, backend=None, boost=0.0, rate_N=None):
        dt = grid.h if dt is None else dt
        check_dt(grid, dt)
        self.grid = grid
        self.dt = dt
        self.backend = _backend.resolve(backend)
        last = grid.N if rate_N is None else rate_N
        p = rate_table(spec, grid, 1, last, u1_shift=0.5 * grid.h)
        self.decay = np.ascontiguousarray(np.exp(-p * dt).reshape(-1))
        self.boost = float(boost)
        self._kernel = _step_numba if self.backend == "numba" else _step_numpy

    def advance(self, values, out=None):
        f = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        if out is None:
            out = np.empty_like(f)
        self._kernel(f, self.decay, self.boost, self.grid.M, out)
        return out.reshape(self.grid.shape)


def step(field: DensityField, spec: RateSpec, dt, backend=None) -> DensityField:
    """One step of length dt = h."""
    st = Stepper(spec, field.grid, dt, backend)
    return DensityField(field.grid, st.advance(field.values))


# evolution -------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    mass: np.ndarray
    sigma: np.ndarray
    l1_to_ref: np.ndarray
    snapshots: dict = dc_field(default_factory=dict)
    final: Optional[DensityField] = None

    def snapshot(self, t):
        for key, f in self.snapshots.items():
            if abs(key - t) < 1e-9:
                return f
        raise KeyError(t)


def evolve(field: DensityField, spec: RateSpec, config: SolverConfig, reference=None, backend=None):
    """March ``field`` to t_end, recording series every ``record_every`` steps."""
    check_dt(field.grid, config.dt)
    if reference is not None and reference.grid != field.grid:
        raise ArgumentError("reference field lives on a different grid")
    st = Stepper(spec, field.grid, config.dt, backend)
    n = config.n_steps
    snap_steps = {int(round(t / config.dt)): t for t in config.snapshot_times}
    times, mass, sig, dist = [], [], [], []
    snaps = {}
    v = field.values.copy()
    buf = np.empty(v.size)

    def record(k, values):
        f = DensityField(field.grid, values)
        times.append(k * config.dt)
        mass.append(f.mass)
        sig.append(sigma_moment(f))
        dist.append(l1_distance(f, reference) if reference is not None else math.nan)

    record(0, v)
    if 0 in snap_steps:
        snaps[snap_steps[0]] = DensityField(field.grid, v.copy())
    for k in range(1, n + 1):
        new = st.advance(v, buf)
        buf = v.reshape(-1)
        v = new
        if k % config.record_every == 0 or k == n or k in snap_steps:
            record(k, v)
        if k in snap_steps:
            snaps[snap_steps[k]] = DensityField(field.grid, v.copy())
    return Trajectory(
        np.array(times), np.array(mass), np.array(sig), np.array(dist), snaps,
        DensityField(field.grid, v.copy()),
    )


def write_trajectory_csv(path, traj: Trajectory):
    with open(path, "w") as fh:
        fh.write("t,mass,sigma_moment,l1_to_steady\n")
        for row in zip(traj.times, traj.mass, traj.sigma, traj.l1_to_ref):
            fh.write(",".join(fmt(x) for x in row) + "\n")


# steady states ------------------------------------------------------------------

@dataclass
class SteadyResult:
    field: DensityField
    residual: float
    elapsed: float
    converged: bool
    growth_factor: float = 1.0
    wall_seconds: float = 0.0


def _iterate_to_fixed_point(stepper, init, tol, max_time, renormalize):
    grid = init.grid
    per_unit = max(1, int(round(1.0 / grid.h)))
    unit = per_unit * grid.h
    v = init.values.copy()
    buf = np.empty(v.size)
    residual = math.inf
    growth = 1.0
    elapsed = 0.0
    t0 = time.perf_counter()
    while elapsed < max_time - 1e-12:
        prev = v.copy()
        log_growth = 0.0
        for _ in range(per_unit):
            new = stepper.advance(v, buf)
            buf = v.reshape(-1)
            v = new
            if renormalize:
                total = v.sum()
                log_growth += math.log(total)
                v /= total
        elapsed += unit
        residual = float(np.abs(v - prev).sum())
        growth = math.exp(log_growth / unit) if renormalize else 1.0
        if residual < tol:
            break
    return SteadyResult(
        DensityField(grid, v), residual, elapsed, residual < tol, growth, time.perf_counter() - t0
    )


def steady_state(spec: RateSpec, grid: GapGrid, steady_tol=1e-9, steady_max_time=400.0,
                 init: Optional[DensityField] = None, backend=None) -> SteadyResult:
    """Iterate steps until the one-unit-time L1 change drops below steady_tol.

    Starts from the product-exponential field with rate a_minus unless
    ``init`` is given. A run that hits steady_max_time returns the last
    iterate with ``converged=False``.
    """
    if init is None:
        init = init_density(grid, "product-exponential", rate=spec.bounds(grid.N)[0])
    st = Stepper(spec, grid, grid.h, backend)
    return _iterate_to_fixed_point(st, init, steady_tol, steady_max_time, renormalize=False)


def solve_inflated(spec: RateSpec, K, eps_K, grid: GapGrid, tol=1e-9, max_time=400.0,
                   init=None, backend=None) -> SteadyResult:
    """Stationary profile of the K-marginal growth system.

    Interior loss is p_K; the boundary receives (p_K + eps_K) times the mass,
    so the total mass grows like e^{eps_K t}. The iterate is renormalized
    every step and ``growth_factor`` reports the measured per-unit-time
    growth.
    """
    if grid.N != K:
        raise ArgumentError(f"inflated system lives on a K={K} grid, got N={grid.N}")
    if eps_K < 0:
        raise ArgumentError("eps_K must be nonnegative")
    if init is None:
        init = init_density(grid, "product-exponential", rate=spec.bounds(K)[0] + eps_K)
    boost = math.expm1(eps_K * grid.h)
    st = Stepper(spec, grid, grid.h, backend, boost=boost)
    return _iterate_to_fixed_point(st, init, tol, max_time, renormalize=True)


def analytic_constant_steady(grid: GapGrid, c) -> DensityField:
    """Exact cell integrals of c^N e^{-c s_N}; in gaps a product of exponentials."""
    return init_density(grid, "product-exponential", rate=c)


# diagnostics --------------------------------------------------------------------

def boundary_flux(field: DensityField, spec: RateSpec):
    """Renewal mass per unit time, indexed by the first N-1 gaps.

    For N = 1 the total flux is returned as a float.
    """
    p = rate_table(spec, field.grid)
    rate_mass = p * field.values
    if field.N == 1:
        return float(rate_mass.sum())
    return marginal(DensityField(field.grid, rate_mass), field.N - 1)


@dataclass(frozen=True)
class LowerBoundReport:
    holds: bool
    worst_slack: float
    n_cells: int


def doeblin_lower_bound_check(field: DensityField, spec: RateSpec, t, tol=None) -> LowerBoundReport:
    """Density >= a_-^N exp(-a_+ s_N) - tol on cells lying inside s_N <= t.

    ``s_N`` is taken at the outer cell corner, where the bound is smallest.
    The default tolerance is 5h.
    """
    g = field.grid
    tol = 5 * g.h if tol is None else tol
    a_minus, a_plus = spec.bounds(g.N)
    outer = np.zeros(g.shape)
    edges = (np.arange(g.M) + 1.0) * g.h
    for k in range(g.N):
        outer = outer + g.axis_view(edges, k)
    mask = outer <= t + 1e-9 * max(1.0, t)
    if not mask.any():
        return LowerBoundReport(True, math.inf, 0)
    bound = a_minus**g.N * np.exp(-a_plus * outer[mask])
    slack = field.density()[mask] - bound
    worst = float(slack.min())
    return LowerBoundReport(worst >= -tol, worst, int(mask.sum()))


@dataclass(frozen=True)
class DominationReport:
    holds: bool
    C_K: float
    eps: float
    worst_excess: float
    times: tuple


def check_domination(spec: RateSpec, init: DensityField, K, t_end, eps=None, tol=None,
                     backend=None) -> DominationReport:
    """Propagation of n^(K)(0) <= C_K nbar_K to n^(K)(t) <= C_K e^{eps t} nbar_K.

    The N-times solution is evolved from ``init``; nbar_K solves the inflated
    system with the K-truncated rate. Excess is measured in density units.
    """
    g = init.grid
    eps = tail_norm(spec, K, g.N) if eps is None else eps
    tol = 5 * g.h if tol is None else tol
    spec_K = truncate(spec, K)
    gK = g.sub(K)
    bar = solve_inflated(spec_K, K, eps, gK, backend=backend).field.values
    m0 = marginal(init, K).values
    pos = bar > 0
    if np.any(m0[~pos] > 0):
        raise ArgumentError("initial marginal charges cells where nbar_K vanishes")
    C_K = float((m0[pos] / bar[pos]).max())
    per_unit = max(1, int(round(1.0 / g.h)))
    n = int(round(t_end / g.h))
    st = Stepper(spec, g, g.h, backend)
    v = init.values.copy()
    worst = -math.inf
    times = []
    vol = g.h**K
    for k in range(1, n + 1):
        v = st.advance(v)
        if k % per_unit == 0 or k == n:
            t = k * g.h
            m = marginal(DensityField(g, v), K).values
            excess = float(((m - C_K * math.exp(eps * t) * bar) / vol).max())
            worst = max(worst, excess)
            times.append(t)
    return DominationReport(worst <= tol, C_K, eps, worst, tuple(times))
