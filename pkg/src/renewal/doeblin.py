"""Doeblin constants, rate bounds and convergence certificates.

alpha_N(t*) = a_-^N int_0^{t*} s^{N-1}/(N-1)! e^{-a_+ s} ds
            = (a_-/a_+)^N P(N, a_+ t*)

with P the regularized lower incomplete gamma function, evaluated by
composite Gauss-Legendre quadrature in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, InternalError
from .grid import fmt
from .model import RateSpec, tail_norm

QUAD_RTOL = 1e-10
_GL_ORDER = 24
LOG_SPACE_BELOW = 1e-14


@lru_cache(maxsize=None)
def _gauss_legendre(n):
    return np.polynomial.legendre.leggauss(n)


def _panel_quadrature(N, x, panels):
    nodes, weights = _gauss_legendre(_GL_ORDER)
    edges = np.linspace(0.0, x, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    s = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    log_f = (N - 1) * np.log(s) - s - math.lgamma(N)
    # log-sum-exp keeps tiny integrals representable
    top = log_f.max()
    return top + math.log(float(np.dot(w, np.exp(log_f - top))))


def log_lower_gamma_regularized(N, x, rtol=QUAD_RTOL):
    """log P(N, x) by panel doubling until the relative change is below rtol."""
    if N < 1:
        raise ArgumentError("N must be >= 1")
    if x <= 0:
        return -math.inf
    if N == 1:
        return math.log(-math.expm1(-x))
    prev = _panel_quadrature(N, x, 1)
    panels = 1
    for _ in range(20):
        panels *= 2
        cur = _panel_quadrature(N, x, panels)
        if abs(math.expm1(cur - prev)) < rtol and panels >= 4:
            return cur
        prev = cur
    raise InternalError(f"incomplete gamma quadrature did not converge (N={N}, x={x})")


def lower_gamma_regularized(N, x, rtol=QUAD_RTOL):
    return math.exp(log_lower_gamma_regularized(N, x, rtol))


def lower_gamma_series(N, x):
    """1 - e^{-x} sum_{k<N} x^k/k!: closed form for integer N (cross-check)."""
    term = 1.0
    total = 1.0
    for k in range(1, N):
        term *= x / k
        total += term
    return 1.0 - math.exp(-x) * total


@dataclass(frozen=True)
class DoeblinConstants:
    N: int
    t_star: float
    alpha: float
    lam: float
    c: float
    log_alpha: float
    a_minus: float
    a_plus: float


def constants(a_minus, a_plus, N, t_star) -> DoeblinConstants:
    if not (a_minus > 0 and a_plus > 0 and t_star > 0) or N < 1:
        raise ArgumentError("constants need positive a_minus, a_plus, t_star and N >= 1")
    log_alpha = float(N * math.log(a_minus / a_plus) + log_lower_gamma_regularized(N, a_plus * t_star))
    alpha = math.exp(log_alpha)
    # alpha may underflow for huge N; log_alpha stays meaningful then
    if not alpha < 1 or not math.isfinite(log_alpha):
        raise InternalError(f"alpha={alpha} (log {log_alpha}) outside (0, 1)")
    if alpha < LOG_SPACE_BELOW:
        # -log1p(-alpha) == alpha to double precision here
        lam = alpha / t_star
    else:
        lam = -math.log1p(-alpha) / t_star
    return DoeblinConstants(N, t_star, alpha, lam, 1.0 / (1.0 - alpha), log_alpha, a_minus, a_plus)


@dataclass(frozen=True)
class RecommendedTstar:
    N: int
    t_star: float
    rate_bound: float
    gamma_check: float
    gamma_ok: bool


def recommended_tstar(N, a_minus, a_plus) -> RecommendedTstar:
    """t* = N/a_+ and the guaranteed alpha/t* >= (a_-/2N)(a_-/a_+)^{N-1}.

    The guarantee rests on P(N, N) >= 1/2, which is evaluated and reported.
    """
    if N < 1 or not (a_minus > 0 and a_plus > 0):
        raise ArgumentError("positive inputs required")
    t_star = N / a_plus
    bound = a_minus / (2.0 * N) * (a_minus / a_plus) ** (N - 1)
    g = lower_gamma_regularized(N, float(N))
    return RecommendedTstar(N, t_star, bound, g, g >= 0.5)


@dataclass(frozen=True)
class ConvergenceReport:
    holds: bool
    worst_ratio: float
    worst_excess: float
    fitted_rate: float
    max_cycle_ratio: float
    cycle_ok: bool


def fit_decay_rate(times, values, floor=1e-12):
    """Least-squares slope of -log(value) in t over positive samples."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(values, dtype=float)
    keep = d > floor
    if keep.sum() < 2:
        return math.inf
    slope = np.polyfit(t[keep], np.log(d[keep]), 1)[0]
    return float(-slope)


def cycle_ratios(times, values, t_star):
    """d((k+1)t*)/d(k t*) for all k where both samples exist."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(values, dtype=float)
    out = []
    k = 0
    while True:
        i = np.flatnonzero(np.abs(t - k * t_star) < 1e-9)
        j = np.flatnonzero(np.abs(t - (k + 1) * t_star) < 1e-9)
        if not len(i) or not len(j):
            break
        if d[i[0]] > 0:
            out.append(float(d[j[0]] / d[i[0]]))
        k += 1
    return out


def certify_convergence(series, consts: DoeblinConstants, d0, tol_disc, cycle_tol=None) -> ConvergenceReport:
    """Check d(t) <= c e^{-lambda t} d0 + tol_disc at every sample.

    Per-cycle ratios d((k+1)t*)/d(kt*) are compared with 1 - alpha + cycle_tol
    (default tol_disc) where the series has samples on multiples of t*.
    """
    t = np.array([p[0] for p in series], dtype=float)
    d = np.array([p[1] for p in series], dtype=float)
    bound = consts.c * np.exp(-consts.lam * t) * d0
    excess = d - bound
    worst_excess = float(excess.max()) if len(d) else -math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, d / bound, np.where(d > 0, math.inf, 0.0))
    ratios = cycle_ratios(t, d, consts.t_star)
    cycle_tol = tol_disc if cycle_tol is None else cycle_tol
    max_cycle = max(ratios) if ratios else 0.0
    return ConvergenceReport(
        holds=bool(worst_excess <= tol_disc),
        worst_ratio=float(ratio.max()) if len(d) else 0.0,
        worst_excess=worst_excess,
        fitted_rate=fit_decay_rate(t, d),
        max_cycle_ratio=max_cycle,
        cycle_ok=max_cycle <= 1.0 - consts.alpha + cycle_tol,
    )


@dataclass(frozen=True)
class UniformBounds:
    eps: float
    steady_bound: float  # 2 t* eps / alpha
    limsup_bound: float  # 4 t* eps / alpha
    alpha: float
    t_star: float

    def running_bound(self, k, d0):
        """(1 - alpha)^k d0 + limsup bound, valid at t = k t*."""
        return (1.0 - self.alpha) ** k * d0 + self.limsup_bound


def uniform_in_time_bounds(K, N, spec: RateSpec, t_star_K=None, alpha_K=None) -> UniformBounds:
    """Bounds on the K-marginal gap between K- and N-times solutions.

    Missing t*_K / alpha_K default to the recommended choice for the
    K-truncated rate bounds.
    """
    eps = tail_norm(spec, K, N)
    a_minus, a_plus = spec.bounds(K)
    if t_star_K is None:
        t_star_K = recommended_tstar(K, a_minus, a_plus).t_star
    if alpha_K is None:
        alpha_K = constants(a_minus, a_plus, K, t_star_K).alpha
    b2 = 2.0 * t_star_K * eps / alpha_K
    return UniformBounds(eps, b2, 2.0 * b2, alpha_K, t_star_K)


def write_constants_csv(path, rows):
    """rows: iterables of (DoeblinConstants, RecommendedTstar)."""
    with open(path, "w") as fh:
        fh.write("N,t_star,alpha,lambda,c,rate_bound,gamma_check\n")
        for c, rec in rows:
            fh.write(",".join([str(c.N), fmt(c.t_star), fmt(c.alpha), fmt(c.lam), fmt(c.c),
                               fmt(rec.rate_bound), fmt(rec.gamma_check)]) + "\n")
