"""Truncated weighted cost, exact discrete MK distance, contraction runs.

The exact solver is successive shortest paths on the dense bipartite
transportation graph with integer masses (denominator 10^12) and integer
costs. Dijkstra runs on reduced costs c_ij + phi_i - phi_j >= 0; the final
potentials give a dual certificate, and the reported duality gap is
computed in real arithmetic after a c-transform.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from ._backend import njit
from .errors import ArgumentError, DomainError, InternalError, PreconditionError, SizeError
from .grid import fmt
from .model import RateSpec, lipschitz_params

MASS_SCALE = 10**12
MIN_COST_SCALE = 10**9
MAX_ATOMS = 2000
_INT_BUDGET = 2**61


@dataclass(frozen=True)
class CostParams:
    beta: float
    a: float
    N: int

    def __post_init__(self):
        if not (self.beta > 0 and self.a > 0) or self.N < 1:
            raise DomainError("cost needs beta > 0, a > 0, N >= 1")

    @property
    def weights(self):
        return (1.0 + self.beta) ** -np.arange(1, self.N + 1, dtype=float)

    @property
    def cap(self):
        """a/beta, the bound for any pair (the finite sum stays below it)."""
        return self.a / self.beta


def cost(x, y, params: CostParams) -> float:
    """sum_i min(|x_i - y_i|, a) / (1+beta)^i."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (params.N,) or y.shape != (params.N,):
        raise ArgumentError(f"states must have length N={params.N}")
    return float(cost_batch(x[None], y[None], params)[0])


def cost_batch(x, y, params: CostParams):
    """Row-wise cost for (n, N) arrays."""
    d = np.minimum(np.abs(np.asarray(x, float) - np.asarray(y, float)), params.a)
    w = params.weights
    out = np.zeros(d.shape[0])
    for i in range(params.N):
        out = out + d[:, i] * w[i]
    return out


def cost_matrix(X, Y, params: CostParams):
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    w = params.weights
    out = np.zeros((X.shape[0], Y.shape[0]))
    for i in range(params.N):
        out += np.minimum(np.abs(X[:, i, None] - Y[None, :, i]), params.a) * w[i]
    return out


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray  # (n, N) ordered age vectors
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.atoms.shape[0] != self.weights.size:
            raise ArgumentError("one weight per atom")
        if np.any(self.weights <= 0):
            raise DomainError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError(f"weights sum to {self.weights.sum()!r}, not 1")
        if np.any(self.atoms < 0) or np.any(np.diff(self.atoms, axis=1) < 0):
            raise DomainError("atoms must be ordered nonnegative age vectors")

    @classmethod
    def empirical(cls, points):
        points = np.atleast_2d(points)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @property
    def size(self):
        return self.weights.size


@dataclass
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    cost: np.ndarray

    @property
    def objective(self):
        return float(np.dot(self.mass, self.cost))

    def marginals(self, n, m):
        return (np.bincount(self.rows, self.mass, minlength=n),
                np.bincount(self.cols, self.mass, minlength=m))

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("i,j,mass,cost\n")
            for i, j, w, c in zip(self.rows, self.cols, self.mass, self.cost):
                fh.write(f"{i},{j},{fmt(w)},{fmt(c)}\n")


@dataclass
class MKResult:
    value: float
    plan: TransportPlan
    dual_value: float
    duality_gap: float
    relative_gap: float
    cost_scale: int


def integerize_masses(w, total=MASS_SCALE):
    """Largest-remainder rounding of w (normalized) to integers summing to total."""
    w = np.asarray(w, dtype=float)
    scaled = w / w.sum() * total
    base = np.floor(scaled).astype(np.int64)
    short = int(total - base.sum())
    if short < 0 or short > w.size:
        raise InternalError("mass integerization out of range")
    if short:
        frac = scaled - base
        order = np.lexsort((np.arange(w.size), -frac))
        base[order[:short]] += 1
    return base


def _cost_scale(cmax, n, m):
    if cmax <= 0:
        return MIN_COST_SCALE
    room = _INT_BUDGET / (cmax * (n + m + 2))
    if room < MIN_COST_SCALE:
        raise InternalError(f"cost range {cmax} too wide for exact integer arithmetic")
    return int(10 ** math.floor(math.log10(room)))


# min-cost flow kernels -------------------------------------------------------------

_BIG = np.int64(2**62)


@njit
def _ssp_numba(C, a, b):
    n, m = C.shape
    F = np.zeros((n, m), dtype=np.int64)
    ra = a.copy()
    rb = b.copy()
    phi_s = np.zeros(n, dtype=np.int64)
    phi_t = np.zeros(m, dtype=np.int64)
    ds = np.empty(n, dtype=np.int64)
    dt = np.empty(m, dtype=np.int64)
    done_s = np.empty(n, dtype=np.bool_)
    done_t = np.empty(m, dtype=np.bool_)
    pred_s = np.empty(n, dtype=np.int64)
    pred_t = np.empty(m, dtype=np.int64)
    BIG = _BIG
    remaining = ra.sum()
    while remaining > 0:
        for i in range(n):
            ds[i] = 0 if ra[i] > 0 else BIG
            done_s[i] = False
            pred_s[i] = -1
        for j in range(m):
            dt[j] = BIG
            done_t[j] = False
            pred_t[j] = -1
        target = -1
        dtarget = BIG
        while True:
            best = BIG
            bi = -1
            sink = False
            for i in range(n):
                if not done_s[i] and ds[i] < best:
                    best = ds[i]
                    bi = i
            for j in range(m):
                if not done_t[j] and dt[j] < best:
                    best = dt[j]
                    bi = j
                    sink = True
            if bi < 0:
                return F, phi_s, phi_t, False
            if sink:
                done_t[bi] = True
                if rb[bi] > 0:
                    target = bi
                    dtarget = best
                    break
                for i in range(n):
                    if not done_s[i] and F[i, bi] > 0:
                        nd = best - C[i, bi] + phi_t[bi] - phi_s[i]
                        if nd < ds[i]:
                            ds[i] = nd
                            pred_s[i] = bi
            else:
                done_s[bi] = True
                for j in range(m):
                    if not done_t[j]:
                        nd = best + C[bi, j] + phi_s[bi] - phi_t[j]
                        if nd < dt[j]:
                            dt[j] = nd
                            pred_t[j] = bi
        for i in range(n):
            phi_s[i] += min(ds[i], dtarget)
        for j in range(m):
            phi_t[j] += min(dt[j], dtarget)
        delta = rb[target]
        j = target
        while True:
            i = pred_t[j]
            if pred_s[i] < 0:
                delta = min(delta, ra[i])
                break
            jj = pred_s[i]
            delta = min(delta, F[i, jj])
            j = jj
        rb[target] -= delta
        j = target
        while True:
            i = pred_t[j]
            F[i, j] += delta
            if pred_s[i] < 0:
                ra[i] -= delta
                break
            jj = pred_s[i]
            F[i, jj] -= delta
            j = jj
        remaining -= delta
    return F, phi_s, phi_t, True


def _ssp_numpy(C, a, b):
    n, m = C.shape
    F = np.zeros((n, m), dtype=np.int64)
    ra = a.copy()
    rb = b.copy()
    phi_s = np.zeros(n, dtype=np.int64)
    phi_t = np.zeros(m, dtype=np.int64)
    BIG = _BIG
    remaining = int(ra.sum())
    while remaining > 0:
        ds = np.where(ra > 0, 0, BIG).astype(np.int64)
        dt = np.full(m, BIG, dtype=np.int64)
        done_s = np.zeros(n, dtype=bool)
        done_t = np.zeros(m, dtype=bool)
        pred_s = np.full(n, -1, dtype=np.int64)
        pred_t = np.full(m, -1, dtype=np.int64)
        target = -1
        dtarget = BIG
        while True:
            cs = np.where(done_s, BIG, ds)
            ct = np.where(done_t, BIG, dt)
            i_best = int(np.argmin(cs))
            j_best = int(np.argmin(ct))
            # ties go to sources, then to the lowest index, as in the kernel
            if cs[i_best] <= ct[j_best]:
                best = cs[i_best]
                if best >= BIG:
                    return F, phi_s, phi_t, False
                done_s[i_best] = True
                nd = best + C[i_best] + phi_s[i_best] - phi_t
                upd = ~done_t & (nd < dt)
                dt[upd] = nd[upd]
                pred_t[upd] = i_best
            else:
                best = ct[j_best]
                done_t[j_best] = True
                if rb[j_best] > 0:
                    target = j_best
                    dtarget = best
                    break
                nd = best - C[:, j_best] + phi_t[j_best] - phi_s
                upd = ~done_s & (F[:, j_best] > 0) & (nd < ds)
                ds[upd] = nd[upd]
                pred_s[upd] = j_best
        phi_s += np.minimum(ds, dtarget)
        phi_t += np.minimum(dt, dtarget)
        delta = rb[target]
        j = target
        while True:
            i = pred_t[j]
            if pred_s[i] < 0:
                delta = min(delta, ra[i])
                break
            jj = pred_s[i]
            delta = min(delta, F[i, jj])
            j = jj
        rb[target] -= delta
        j = target
        while True:
            i = pred_t[j]
            F[i, j] += delta
            if pred_s[i] < 0:
                ra[i] -= delta
                break
            jj = pred_s[i]
            F[i, jj] -= delta
            j = jj
        remaining -= int(delta)
    return F, phi_s, phi_t, True


def solve_transport(C, wa, wb, backend=None):
    """Exact transportation problem for a real cost matrix and weight vectors."""
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    if n > MAX_ATOMS or m > MAX_ATOMS:
        raise SizeError(f"supports {n}x{m} exceed the exact-solver limit of {MAX_ATOMS}")
    cmin = C.min()
    shifted = C - cmin  # nonnegative costs for the zero initial potentials
    scale = _cost_scale(float(shifted.max()), n, m)
    Ci = np.rint(shifted * scale).astype(np.int64)
    a = integerize_masses(wa)
    b = integerize_masses(wb)
    kernel = _ssp_numba if _backend.resolve(backend) == "numba" else _ssp_numpy
    F, phi_s, phi_t, ok = kernel(Ci, a, b)
    if not ok:
        raise InternalError("transportation flow failed to route all mass")
    rows, cols = np.nonzero(F)
    mass = F[rows, cols] / MASS_SCALE
    plan = TransportPlan(rows, cols, mass, C[rows, cols])
    # dual certificate: beta from the sink potentials, alpha by c-transform
    beta = phi_t / scale + 0.0
    alpha = (C - beta[None, :]).min(axis=1)
    wa_n = np.asarray(wa, float) / np.sum(wa)
    wb_n = np.asarray(wb, float) / np.sum(wb)
    dual = float(np.dot(wa_n, alpha) + np.dot(wb_n, beta))
    primal = plan.objective
    gap = abs(primal - dual)
    rel = gap / max(abs(primal), float(np.abs(C).max()), 1e-300)
    return MKResult(primal, plan, dual, gap, rel, scale)


def exact_mk(mu: DiscreteMeasure, nu: DiscreteMeasure, params: CostParams, backend=None) -> MKResult:
    """Exact MK distance between two finite measures under V_{N,beta,a}."""
    if mu.atoms.shape[1] != params.N or nu.atoms.shape[1] != params.N:
        raise ArgumentError("atom dimension differs from the cost dimension")
    C = cost_matrix(mu.atoms, nu.atoms, params)
    return solve_transport(C, mu.weights, nu.weights, backend)


def vertex_enumeration_mk(C, wa, wb, max_atoms=6):
    """Optimum over all vertices of the transportation polytope.

    Every vertex is a spanning forest, so it can be built by repeatedly
    exhausting one row or column into a single partner with room for it.
    The search runs over these peeling sequences on exact integer residual
    masses, best-first with a consistent lower bound (every remaining unit
    of a row or column pays at least its cheapest live partner), so the
    first completed sequence is a minimum over all vertices. Exponential in
    the worst case: tiny inputs only.
    """
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    if max(n, m) > max_atoms:
        raise SizeError(f"vertex enumeration limited to {max_atoms} atoms per side")
    a0 = tuple(int(x) for x in integerize_masses(wa))
    b0 = tuple(int(x) for x in integerize_masses(wb))

    def lower(ra, rb):
        rows = [i for i in range(n) if ra[i]]
        cols = [j for j in range(m) if rb[j]]
        if not rows:
            return 0.0
        hr = sum(ra[i] * min(C[i, j] for j in cols) for i in rows)
        hc = sum(rb[j] * min(C[i, j] for i in rows) for j in cols)
        return max(hr, hc) / MASS_SCALE

    start = (a0, b0)
    best_g = {start: 0.0}
    heap = [(lower(a0, b0), 0.0, start)]
    while heap:
        f, g, (ra, rb) = heapq.heappop(heap)
        if g > best_g.get((ra, rb), math.inf):
            continue
        if not any(ra):
            return g
        for i in range(n):
            if not ra[i]:
                continue
            for j in range(m):
                if not rb[j]:
                    continue
                q = min(ra[i], rb[j])
                na = list(ra)
                nb = list(rb)
                na[i] -= q
                nb[j] -= q
                state = (tuple(na), tuple(nb))
                ng = g + q / MASS_SCALE * C[i, j]
                if ng < best_g.get(state, math.inf):
                    best_g[state] = ng
                    heapq.heappush(heap, (ng + lower(*state), ng, state))
    raise InternalError("vertex search exhausted without a complete plan")


# contraction experiment -------------------------------------------------------------

@dataclass
class ExperimentRow:
    t: float
    coupled_cost: float
    std_error: float
    bound: float
    exact_mk: float
    subsample_cost: float
    subsample_se: float
    N: int

    @property
    def within_bound(self):
        return self.coupled_cost <= self.bound + 3 * self.std_error

    @property
    def exact_ok(self):
        if math.isnan(self.exact_mk):
            return True
        return self.exact_mk <= self.subsample_cost + 3 * self.subsample_se


@dataclass
class ContractionReport:
    N: int
    gamma: float
    delta: float
    rows: list = field(default_factory=list)
    fitted_rate: float = math.nan
    truncation_error: float = 0.0

    @property
    def holds(self):
        return all(r.within_bound for r in self.rows)

    @property
    def exact_holds(self):
        return all(r.exact_ok for r in self.rows)

    def write_csv(self, path, append=False):
        with open(path, "a" if append else "w") as fh:
            if not append:
                fh.write("t,coupled_cost,std_error,bound,exact_mk,N\n")
            for r in self.rows:
                fh.write(",".join([fmt(r.t), fmt(r.coupled_cost), fmt(r.std_error), fmt(r.bound),
                                   fmt(r.exact_mk), str(r.N)]) + "\n")


def contraction_experiment(spec: RateSpec, params: CostParams, init_pair_sampler, M, t_checkpoints,
                           seed=0, exact_times=(), exact_subsample=1000, backend=None,
                           lipschitz_N=None) -> ContractionReport:
    """Coupled run with the cost bound cost(0) e^{-gamma t} at each checkpoint.

    gamma comes from ``lipschitz_params`` on the full spec (or at
    ``lipschitz_N``); inadmissible parameters raise PreconditionError. At
    ``exact_times`` the exact MK distance between the first
    ``exact_subsample`` members of each cloud is computed as well.
    """
    from .doeblin import fit_decay_rate
    from .particles import coupled_cost, simulate_coupled

    rep = lipschitz_params(spec, params.beta, params.a, lipschitz_N)
    if not rep.admissible:
        raise PreconditionError("contraction hypotheses fail: " + "; ".join(rep.violations))
    if not rep.gamma > 0:
        raise PreconditionError(f"contraction rate gamma={rep.gamma} is not positive")
    times = sorted({0.0, *map(float, t_checkpoints), *map(float, exact_times)})
    cens = simulate_coupled(spec, params.N, M, max(times), init_pair_sampler, seed,
                            snapshot_times=times, backend=backend)
    c0 = coupled_cost(cens, params.beta, params.a, 0.0).mean
    out = ContractionReport(params.N, rep.gamma, rep.delta, truncation_error=cens.truncation_error)
    for t in times:
        st = coupled_cost(cens, params.beta, params.a, t)
        ex, sc, sse = math.nan, math.nan, math.nan
        if any(abs(t - u) < 1e-9 for u in exact_times):
            x, y = cens.at(t)
            k = min(exact_subsample, x.shape[0])
            v = cost_batch(x[:k], y[:k], params)
            sc = float(v.mean())
            sse = float(v.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0
            ex = exact_mk(DiscreteMeasure.empirical(x[:k]), DiscreteMeasure.empirical(y[:k]),
                          params, backend).value
        out.rows.append(ExperimentRow(t, st.mean, st.std_error, c0 * math.exp(-rep.gamma * t),
                                      ex, sc, sse, params.N))
    ts = [r.t for r in out.rows]
    out.fitted_rate = fit_decay_rate(ts, [r.coupled_cost for r in out.rows])
    return out
