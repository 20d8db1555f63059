"""Renewal rates of additive form p_N(s) = sum_{i<=N} phi_i(s_1..s_i).

Built-in components are all of the clamped-affine shape

    phi_i(s) = w_i * clip(b0 + b1 * s_i, lo, hi)

which covers constant components (``b1 = 0``), clamped affine ramps and the
clamped-Lipschitz family ``w_i * ((floor v f(s_i)) ^ cap)`` with affine ``f``.
Such components can be evaluated inside numba kernels from five parameter
arrays. Components depending on the whole prefix ``(s_1..s_i)`` are supported
as ``weighted-generic`` with a user callable and user-declared bounds.

An infinite rate is a finite prefix followed by a geometric tail: component
``i`` beyond the prefix is the tail template scaled by ``weight * ratio**i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, DomainError, RangeError, SpecContractError, UnsupportedError

KINDS = ("constant", "clamped-affine", "clamped-lipschitz", "weighted-generic")
INF = math.inf

# Tolerance for the sampled bound validation.
BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class RateComponent:
    """One additive term phi_i of the renewal rate."""

    index: int
    kind: str
    params: dict = field(default_factory=dict)
    sup_norm: float = 0.0
    declared_lipschitz: Optional[float] = None
    oscillation: Optional[float] = None
    func: Optional[Callable] = None

    @property
    def parametric(self):
        return self.kind != "weighted-generic"

    @property
    def coefficients(self):
        """(w, b0, b1, lo, hi) for built-in kinds."""
        if not self.parametric:
            raise UnsupportedError(f"component {self.index} has no parametric form")
        p = self.params
        return (p["weight"], p["b0"], p["b1"], p["lo"], p["hi"])

    def __call__(self, ages):
        """Evaluate on a batch of age vectors of shape (n, >=index)."""
        ages = np.asarray(ages, dtype=float)
        if self.parametric:
            w, b0, b1, lo, hi = self.coefficients
            return w * np.clip(b0 + b1 * ages[..., self.index - 1], lo, hi)
        return np.asarray(self.func(ages[..., : self.index]), dtype=float)


def _affine_range(b0, b1, lo, hi):
    """Range of clip(b0 + b1*s, lo, hi) over s >= 0."""
    start = min(max(b0, lo), hi)
    if b1 > 0:
        return start, hi
    if b1 < 0:
        return lo, start
    return start, start


def _component(index, kind, weight, b0, b1, lo, hi, params=None):
    if lo > hi:
        raise DomainError(f"component {index}: clamp lo={lo} exceeds hi={hi}")
    if lo < 0 or weight < 0:
        raise DomainError(f"component {index}: renewal rates must be nonnegative")
    vmin, vmax = _affine_range(b0, b1, lo, hi)
    lip = weight * abs(b1) if hi > lo else 0.0
    full = {"weight": weight, "b0": b0, "b1": b1, "lo": lo, "hi": hi}
    if params:
        full.update(params)
    return RateComponent(
        index=index,
        kind=kind,
        params=full,
        sup_norm=weight * vmax,
        declared_lipschitz=lip,
        oscillation=weight * (vmax - vmin),
    )


def constant_component(index, value):
    return _component(index, "constant", float(value), 1.0, 0.0, 1.0, 1.0, {"value": float(value)})


def clamped_affine_component(index, weight, intercept, slope, lo, hi):
    return _component(index, "clamped-affine", weight, intercept, slope, lo, hi)


def clamped_lipschitz_component(index, weight, floor, cap, f0=0.0, f1=1.0):
    """w * ((floor v f(s_i)) ^ cap) with f(s) = f0 + f1*s."""
    return _component(
        index, "clamped-lipschitz", weight, f0, f1, floor, cap,
        {"floor": floor, "cap": cap, "f0": f0, "f1": f1},
    )


def generic_component(index, func, sup_norm, lipschitz=None, oscillation=None):
    """User component phi_i(s_1..s_i); ``func`` maps an (n, i) array to (n,)."""
    return RateComponent(
        index=index,
        kind="weighted-generic",
        sup_norm=float(sup_norm),
        declared_lipschitz=lipschitz,
        oscillation=oscillation,
        func=func,
    )


@dataclass(frozen=True)
class GeometricTail:
    """Components i > prefix: template * weight * ratio**i."""

    kind: str
    b0: float
    b1: float
    lo: float
    hi: float
    weight: float
    ratio: float

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise DomainError("tail ratio must lie in [0, 1)")
        if self.weight < 0:
            raise DomainError("tail weight must be nonnegative")

    def component(self, index):
        w = self.weight * self.ratio**index
        return _component(index, self.kind, w, self.b0, self.b1, self.lo, self.hi)

    def _template_stats(self):
        vmin, vmax = _affine_range(self.b0, self.b1, self.lo, self.hi)
        lip = abs(self.b1) if self.hi > self.lo else 0.0
        return vmin, vmax, lip

    def series(self, first, per_unit):
        """sum_{i >= first} weight*ratio**i * per_unit."""
        if per_unit == 0 or self.weight == 0:
            return 0.0
        return self.weight * per_unit * self.ratio**first / (1.0 - self.ratio)

    def partial(self, first, last, per_unit):
        """sum_{first <= i <= last} weight*ratio**i * per_unit."""
        if last < first or per_unit == 0 or self.weight == 0:
            return 0.0
        if math.isinf(last):
            return self.series(first, per_unit)
        r = self.ratio
        n = last - first + 1
        return self.weight * per_unit * r**first * (1.0 - r**n) / (1.0 - r)


@dataclass(frozen=True)
class RateSpec:
    """Renewal rate with stated bounds a_minus <= p <= a_plus."""

    components: tuple
    a_minus: float
    a_plus: float
    tail: Optional[GeometricTail] = None
    name: str = ""

    def __post_init__(self):
        for k, comp in enumerate(self.components, start=1):
            if comp.index != k:
                raise ArgumentError("components must be indexed consecutively from 1")
        if not (0 < self.a_minus <= self.a_plus < INF):
            raise DomainError("need 0 < a_minus <= a_plus < inf")

    # structure -----------------------------------------------------------
    @property
    def prefix_length(self):
        return len(self.components)

    @property
    def max_index(self):
        return INF if self.tail is not None else len(self.components)

    @property
    def has_closed_tail(self):
        return self.tail is not None

    def check_range(self, N):
        if N < 1:
            raise ArgumentError("dimension N must be >= 1")
        if N > self.max_index:
            raise RangeError(f"rate spec covers i <= {self.max_index}, asked for N={N}")

    def component(self, i):
        if i <= len(self.components):
            return self.components[i - 1]
        if self.tail is None:
            raise RangeError(f"no component {i} in a finite spec of length {len(self.components)}")
        return self.tail.component(i)

    def parametric(self, N):
        self.check_range(N)
        return all(c.parametric for c in self.components[:N])

    def coefficient_arrays(self, N):
        """Arrays (w, b0, b1, lo, hi) of length N for numba kernels."""
        self.check_range(N)
        rows = [self.component(i).coefficients for i in range(1, N + 1)]
        arr = np.array(rows, dtype=np.float64).reshape(N, 5)
        return tuple(np.ascontiguousarray(arr[:, k]) for k in range(5))

    # norms and bounds ------------------------------------------------------
    def _stat_sum(self, first, last, stat):
        """sum over first..last of a per-component statistic (sup/inf)."""
        total = 0.0
        upto = min(last, len(self.components))
        for i in range(first, int(upto) + 1):
            c = self.components[i - 1]
            if stat == "sup":
                total += c.sup_norm
            else:
                if c.parametric:
                    w, b0, b1, lo, hi = c.coefficients
                    total += w * _affine_range(b0, b1, lo, hi)[0]
        if self.tail is not None and last > len(self.components):
            vmin, vmax, _ = self.tail._template_stats()
            start = max(first, len(self.components) + 1)
            total += self.tail.partial(start, last, vmax if stat == "sup" else vmin)
        return total

    def bounds(self, N=None):
        """Valid (lower, upper) bounds for the N-truncated rate p_N.

        ``None`` means the full rate, whose bounds are the stored ones. A
        truncation drops nonnegative terms, so the upper bound stays a_plus and
        the lower bound is the larger of a_minus - eps_N and the exact infimum
        of the retained parametric components.
        """
        if N is None or (math.isinf(N) and self.tail is not None):
            return self.a_minus, self.a_plus
        self.check_range(N)
        if N == self.max_index:
            return self.a_minus, self.a_plus
        lower = self.a_minus - tail_norm(self, N, self.max_index)
        if self.parametric(N):
            lower = max(lower, self._stat_sum(1, N, "inf"))
        return lower, self.a_plus

    def validate(self, n_samples=10_000, seed=0, N=None):
        """Sample admissible points and reject bound violations above 1e-12."""
        total_sup = self._stat_sum(1, self.max_index, "sup")
        if total_sup > self.a_plus + BOUND_SLACK:
            raise SpecContractError(f"sum of sup norms {total_sup} exceeds a_plus={self.a_plus}")
        rng = np.random.default_rng(seed)
        if N is None:
            N = self.prefix_length if self.tail is None else self.prefix_length + 40
        N = max(int(N), 1)
        gaps = rng.exponential(scale=rng.choice([0.3, 1.0, 5.0], size=(n_samples, 1)), size=(n_samples, N))
        gaps[rng.random(gaps.shape) < 0.1] = 0.0
        ages = np.cumsum(gaps, axis=1)
        values = eval_rate(self, ages)
        lo, hi = self.bounds(N)
        # Tail beyond the sampled dimension contributes within [inf, sup].
        if self.tail is not None:
            extra_inf = self._stat_sum(N + 1, INF, "inf")
            extra_sup = self._stat_sum(N + 1, INF, "sup")
            lo, hi = self.a_minus, self.a_plus
            vmin, vmax = values.min() + extra_inf, values.max() + extra_sup
        else:
            vmin, vmax = values.min(), values.max()
        if vmin < lo - BOUND_SLACK or vmax > hi + BOUND_SLACK:
            raise SpecContractError(
                f"sampled rate range [{vmin}, {vmax}] violates bounds [{lo}, {hi}]"
            )
        return self


def _check_ages(ages):
    ages = np.asarray(ages, dtype=float)
    if ages.ndim == 0:
        ages = ages.reshape(1)
    if np.any(ages < 0) or np.any(np.diff(ages, axis=-1) < 0) or not np.all(np.isfinite(ages)):
        raise DomainError("ages must be finite, nonnegative and nondecreasing")
    return ages


def component_values(spec: RateSpec, ages, first=1, last=None):
    """Per-component values phi_i(ages) for first <= i <= last, shape (..., count)."""
    ages = np.asarray(ages, dtype=float)
    N = ages.shape[-1]
    last = N if last is None else last
    spec.check_range(last)
    cols = [spec.component(i)(ages) for i in range(first, last + 1)]
    if not cols:
        return np.zeros(ages.shape[:-1] + (0,))
    return np.stack(cols, axis=-1)


def eval_rate(spec: RateSpec, ages):
    """p_N at ordered age vectors; N is the length of the last axis.

    Accepts one vector or a batch of shape (n, N). Values lie within
    ``spec.bounds(N)``; for the full rate those are [a_minus, a_plus].
    """
    ages = _check_ages(ages)
    N = ages.shape[-1]
    spec.check_range(N)
    out = np.zeros(ages.shape[:-1])
    for i in range(1, N + 1):
        out = out + spec.component(i)(ages)
    return float(out) if out.ndim == 0 else out


def tail_norm(spec: RateSpec, K, N):
    """eps_{K,N} = sum_{i=K+1}^{N} ||phi_i||_inf; N may be math.inf."""
    if K < 0 or K > N:
        raise ArgumentError(f"need 0 <= K <= N, got K={K}, N={N}")
    if math.isinf(N) and spec.tail is None:
        # A finite spec has no components beyond its length.
        if spec.max_index < INF:
            N = spec.max_index
        else:  # pragma: no cover
            raise UnsupportedError("infinite tail norm needs a closed-form tail")
    if N > spec.max_index:
        raise RangeError(f"rate spec covers i <= {spec.max_index}, asked for N={N}")
    if K >= N:
        return 0.0
    return spec._stat_sum(K + 1, N, "sup")


# constructors ----------------------------------------------------------------

def constant_rate(c, name=None):
    """p_N = c for every N (one constant component, zero tail)."""
    comps = (constant_component(1, c),)
    tail = GeometricTail("constant", 1.0, 0.0, 1.0, 1.0, 0.0, 0.5)
    return RateSpec(comps, float(c), float(c), tail, name or f"constant({c})")


def geometric_constant_rate(weight, ratio, prefix=0, name=None):
    """phi_i = weight * ratio**i; bounds are p_1 and the full series."""
    tail = GeometricTail("constant", 1.0, 0.0, 1.0, 1.0, float(weight), float(ratio))
    comps = tuple(tail.component(i) for i in range(1, prefix + 1))
    comps = tuple(constant_component(i, c.sup_norm) for i, c in enumerate(comps, start=1))
    a_minus = weight * ratio
    a_plus = weight * ratio / (1.0 - ratio)
    return RateSpec(comps, a_minus, a_plus, tail, name or f"geometric({weight},{ratio})")


def finite_constant_rate(values, name=None):
    """Finite spec with constant components phi_i = values[i-1]."""
    comps = tuple(constant_component(i, v) for i, v in enumerate(values, start=1))
    total = float(sum(values))
    return RateSpec(comps, total, total, None, name or f"constants{tuple(values)}")


def clamped_lipschitz_rate(a_minus, C, beta, f0=0.0, f1=1.0, name=None):
    """Clamped Lipschitz rate sum_i ((a_- v f(s_i)) ^ C a_-) / (1+beta)**i.

    With f(s) = s the weighted Lipschitz constant is 1 and the weighted
    fluctuation is (C-1) a_-. Bounds are the exact series a_-/beta, C a_-/beta.
    """
    if C < 1:
        raise DomainError("cap factor C must be >= 1")
    ratio = 1.0 / (1.0 + beta)
    tail = GeometricTail("clamped-lipschitz", f0, f1, a_minus, C * a_minus, 1.0, ratio)
    vmin, vmax = _affine_range(f0, f1, a_minus, C * a_minus)
    return RateSpec((), vmin / beta, vmax / beta, tail,
                    name or f"clamped(a-={a_minus},C={C},beta={beta})")


def clamped_affine_rate(weight, ratio, intercept, slope, lo, hi, prefix=None, name=None):
    """phi_i = weight*ratio**i * clip(intercept + slope*s_i, lo, hi).

    With ``prefix`` the rate is finite with that many components; otherwise
    it carries the geometric tail.
    """
    tail = GeometricTail("clamped-affine", intercept, slope, lo, hi, weight, ratio)
    vmin, vmax = _affine_range(intercept, slope, lo, hi)
    if prefix is None:
        comps = ()
        a_minus = weight * ratio / (1 - ratio) * vmin
        a_plus = weight * ratio / (1 - ratio) * vmax
        spec_tail = tail
    else:
        comps = tuple(tail.component(i) for i in range(1, prefix + 1))
        comps = tuple(
            clamped_affine_component(i, c.params["weight"], intercept, slope, lo, hi)
            for i, c in enumerate(comps, start=1)
        )
        a_minus = sum(c.params["weight"] for c in comps) * vmin
        a_plus = sum(c.params["weight"] for c in comps) * vmax
        spec_tail = None
    if a_minus <= 0:
        raise DomainError("clamped-affine rate needs a positive floor")
    return RateSpec(comps, a_minus, a_plus, spec_tail, name or "clamped-affine")


def truncate(spec: RateSpec, N, name=None):
    """Finite spec holding the first N components, with truncation bounds."""
    spec.check_range(N)
    comps = tuple(spec.component(i) for i in range(1, N + 1))
    lo, hi = spec.bounds(N)
    return RateSpec(comps, lo, hi, None, name or f"{spec.name}[:{N}]")


# Lipschitz machinery -----------------------------------------------------------

@dataclass(frozen=True)
class LipschitzReport:
    beta: float
    a: float
    L: float
    F: float
    delta: float
    gamma: float
    a_minus: float
    admissible: bool
    violations: tuple = ()

    @property
    def threshold(self):
        """a_- beta^2 / (1+beta), the admissibility level for F and aL."""
        return self.a_minus * self.beta**2 / (1.0 + self.beta)


def _weighted_max(spec, N, beta, attr):
    q = 1.0 + beta
    best = 0.0
    upto = len(spec.components) if math.isinf(N) else min(int(N), len(spec.components))
    for i in range(1, upto + 1):
        c = spec.components[i - 1]
        val = getattr(c, attr)
        if val is None:
            raise UnsupportedError(f"component {i} declares no {attr.replace('_', ' ')} bound")
        best = max(best, q**i * val)
    if spec.tail is not None and N > len(spec.components):
        vmin, vmax, lip = spec.tail._template_stats()
        unit = lip if attr == "declared_lipschitz" else vmax - vmin
        if unit > 0 and spec.tail.weight > 0:
            first = len(spec.components) + 1
            growth = q * spec.tail.ratio
            if math.isinf(N):
                if growth > 1 + 1e-15:
                    return INF
                best = max(best, spec.tail.weight * unit * growth**first)
            else:
                last = int(N)
                idx = last if growth > 1 else first
                best = max(best, spec.tail.weight * unit * growth**idx)
    return best


def lipschitz_params(spec: RateSpec, beta, a, N=None):
    """Weighted Lipschitz constant L, fluctuation F and the derived delta, gamma.

    ``N=None`` uses the full spec (infinite when a tail is present). The lower
    bound entering gamma is that of the N-truncated rate.
    """
    if beta <= 0 or a <= 0:
        raise DomainError("beta and a must be positive")
    N = spec.max_index if N is None else N
    L = _weighted_max(spec, N, beta, "declared_lipschitz")
    F = _weighted_max(spec, N, beta, "oscillation")
    a_minus = spec.bounds(N)[0]
    delta = max(F / a, L)
    gamma = beta * a_minus / (1.0 + beta) - a * delta / beta
    level = a_minus * beta**2 / (1.0 + beta)
    violations = []
    if not F < level:
        violations.append(f"F={F:.6g} < a_minus*beta^2/(1+beta)={level:.6g}")
    if not a * L < level:
        violations.append(f"a*L={a * L:.6g} < a_minus*beta^2/(1+beta)={level:.6g}")
    return LipschitzReport(beta, a, L, F, delta, gamma, a_minus, not violations, tuple(violations))


@dataclass(frozen=True)
class UniformLimitDiagnostic:
    rows: tuple  # (N, r_N)
    ratio_limit: float
    holds: bool


def uniform_limit_diagnostic(spec: RateSpec, N_list: Sequence[int]):
    """r_N = eps_N * N * (a_+/a_-)**N; the decay condition needs r_N -> 0."""
    if spec.tail is None:
        raise UnsupportedError("uniform-limit diagnostic needs a closed-form tail")
    ratio_pm = spec.a_plus / spec.a_minus
    rows = []
    for N in N_list:
        eps = tail_norm(spec, N, INF)
        if eps == 0:
            rows.append((int(N), 0.0))
            continue
        log_r = math.log(eps) + math.log(N) + N * math.log(ratio_pm)
        rows.append((int(N), math.exp(log_r) if log_r < 700 else INF))
    vmin, vmax, _ = spec.tail._template_stats()
    zero_tail = spec.tail.weight == 0 or vmax == 0 or spec.tail.ratio == 0
    limit = 0.0 if zero_tail else spec.tail.ratio * ratio_pm
    return UniformLimitDiagnostic(tuple(rows), limit, zero_tail or limit < 1.0)
