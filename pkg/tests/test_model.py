import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from renewal import errors
from renewal.model import (
    clamped_affine_rate,
    clamped_lipschitz_rate,
    component_values,
    constant_rate,
    eval_rate,
    finite_constant_rate,
    generic_component,
    geometric_constant_rate,
    lipschitz_params,
    RateSpec,
    tail_norm,
    truncate,
    uniform_limit_diagnostic,
)
from renewal.transport import CostParams, cost_batch

BUILTIN = [
    constant_rate(1.0),
    constant_rate(0.5),
    geometric_constant_rate(1.0, 0.5),
    geometric_constant_rate(1.0, 0.4),
    finite_constant_rate([0.3, 0.2, 0.1]),
    clamped_lipschitz_rate(1.0, 1.4, 1.0),
    clamped_lipschitz_rate(1.0, 2.0, 1.0),
    clamped_affine_rate(1.0, 0.5, 0.5, 0.2, 0.5, 1.5),
    clamped_affine_rate(1.0, 0.5, 1.0, -0.1, 0.2, 1.0, prefix=4),
]


def random_ages(rng, n, N, scale=3.0):
    return np.cumsum(rng.exponential(scale, size=(n, N)), axis=1)


# examples --------------------------------------------------------------------

def test_constant_rate_value():
    assert eval_rate(constant_rate(1.0), [2.5]) == 1.0


def test_clamped_example_hand_evaluation():
    spec = clamped_lipschitz_rate(1.0, 2.0, 1.0)
    assert eval_rate(spec, [0.5, 3.0]) == pytest.approx(1.0, abs=1e-15)
    assert eval_rate(spec, [0.0, 0.0]) == pytest.approx(0.75, abs=1e-15)


def test_eval_rate_batch_matches_scalar(rng):
    spec = clamped_lipschitz_rate(1.0, 1.4, 1.0)
    ages = random_ages(rng, 20, 5)
    batch = eval_rate(spec, ages)
    assert batch.shape == (20,)
    for row, v in zip(ages, batch):
        assert eval_rate(spec, row) == v


def test_eval_rate_errors():
    with pytest.raises(errors.DomainError):
        eval_rate(constant_rate(1.0), [2.0, 1.0])
    with pytest.raises(errors.DomainError):
        eval_rate(constant_rate(1.0), [-1.0])
    with pytest.raises(errors.RangeError):
        eval_rate(finite_constant_rate([0.5, 0.5]), [1.0, 2.0, 3.0])


def test_tail_norm_geometric():
    spec = geometric_constant_rate(1.0, 0.5)
    assert tail_norm(spec, 1, 3) == pytest.approx(0.375, abs=1e-15)
    assert tail_norm(spec, 2, 2) == 0.0
    assert tail_norm(spec, 1, math.inf) == pytest.approx(0.5, abs=1e-15)
    assert tail_norm(spec, 2, 3) == pytest.approx(0.125, abs=1e-15)


def test_tail_norm_errors():
    spec = geometric_constant_rate(1.0, 0.5)
    with pytest.raises(errors.ArgumentError):
        tail_norm(spec, 3, 2)
    with pytest.raises(errors.RangeError):
        tail_norm(finite_constant_rate([1.0]), 0, 3)


def test_lipschitz_example():
    rep = lipschitz_params(clamped_lipschitz_rate(1.0, 1.4, 1.0), 1.0, 0.4)
    assert rep.F == pytest.approx(0.4, abs=1e-12)
    assert rep.a * rep.L == pytest.approx(0.4, abs=1e-12)
    assert rep.threshold == pytest.approx(0.5)
    assert rep.admissible and not rep.violations
    assert rep.delta == pytest.approx(1.0, abs=1e-12)
    assert rep.gamma == pytest.approx(0.1, abs=1e-12)


def test_lipschitz_constant_rate_has_no_fluctuation():
    rep = lipschitz_params(constant_rate(1.0), 1.0, 0.4)
    assert rep.delta == 0.0
    assert rep.gamma == pytest.approx(0.5)


def test_lipschitz_inadmissible_names_violation():
    rep = lipschitz_params(clamped_lipschitz_rate(1.0, 1.4, 1.0), 1.0, 2.0)
    assert not rep.admissible
    assert any("a*L" in v for v in rep.violations)


def test_lipschitz_generic_without_bounds_unsupported():
    comp = generic_component(1, lambda s: np.full(s.shape[:-1], 0.5), 0.5)
    spec = RateSpec((comp,), 0.5, 0.5)
    with pytest.raises(errors.UnsupportedError):
        lipschitz_params(spec, 1.0, 0.5)


@pytest.mark.parametrize("rho,limit,holds", [(0.4, 2 / 3, True), (0.6, 1.5, False)])
def test_uniform_limit(rho, limit, holds):
    spec = geometric_constant_rate(1.0, rho)
    diag = uniform_limit_diagnostic(spec, range(1, 30))
    assert diag.ratio_limit == pytest.approx(limit)
    assert diag.holds is holds
    r = [v for _, v in diag.rows]
    # the observed ratio tends to the limit
    assert r[-1] / r[-2] == pytest.approx(limit * 29 / 28, rel=1e-9)


def test_uniform_limit_needs_tail():
    with pytest.raises(errors.UnsupportedError):
        uniform_limit_diagnostic(finite_constant_rate([1.0]), [1, 2])


def test_validate_rejects_wrong_bounds():
    spec = finite_constant_rate([0.5, 0.5])
    with pytest.raises(errors.SpecContractError):
        RateSpec(spec.components, 0.5, 0.8).validate()
    with pytest.raises(errors.SpecContractError):
        RateSpec(spec.components, 1.2, 1.5).validate()


def test_truncation_bounds_hold():
    spec = geometric_constant_rate(1.0, 0.5)
    lo, hi = spec.bounds(2)
    assert (lo, hi) == (0.75, 1.0)
    t = truncate(spec, 2)
    assert t.max_index == 2
    assert eval_rate(t, [1.0, 2.0]) == 0.75


def test_component_values_shape(rng):
    spec = geometric_constant_rate(1.0, 0.5)
    v = component_values(spec, random_ages(rng, 7, 4), 2, 4)
    assert v.shape == (7, 3)
    np.testing.assert_allclose(v[0], [0.25, 0.125, 0.0625])


# properties ------------------------------------------------------------------

@pytest.mark.parametrize("spec", BUILTIN, ids=lambda s: s.name)
def test_rate_within_bounds(spec, rng):
    N = min(spec.max_index, 12)
    ages = random_ages(rng, 10_000, N, scale=1.5)
    ages[::7, :2] = 0.0
    ages = np.sort(ages, axis=1)
    v = eval_rate(spec, ages)
    lo, hi = spec.bounds(N)
    assert v.min() >= lo - 1e-12 and v.max() <= hi + 1e-12
    if spec.max_index == math.inf or N == spec.max_index:
        assert lo >= spec.a_minus - 1e-12 or spec.max_index == math.inf


@given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 2**32 - 1))
def test_truncation_difference_bounded_by_tail(N, K, seed):
    K = min(K, N)
    spec = clamped_affine_rate(1.0, 0.5, 0.5, 0.2, 0.5, 1.5)
    ages = random_ages(np.random.default_rng(seed), 50, N)
    full = eval_rate(spec, ages)
    head = eval_rate(spec, ages[:, :K]) if K else np.zeros(len(ages))
    tail = component_values(spec, ages, K + 1, N).sum(axis=-1)
    np.testing.assert_allclose(full - head, tail, atol=1e-14)
    assert np.all(np.abs(full - head) <= tail_norm(spec, K, N) + 1e-14)


@pytest.mark.parametrize("N", [1, 4, 12])
def test_rate_lipschitz_in_weighted_cost(N, rng):
    spec = clamped_lipschitz_rate(1.0, 1.4, 1.0)
    rep = lipschitz_params(spec, 1.0, 0.4)
    assert rep.admissible
    x = random_ages(rng, 10_000, N, scale=0.8)
    y = np.where(rng.random(x.shape) < 0.5, x, random_ages(rng, 10_000, N, scale=0.8))
    y = np.sort(y, axis=1)
    diff = np.abs(eval_rate(spec, x) - eval_rate(spec, y))
    V = cost_batch(x, y, CostParams(1.0, 0.4, N))
    assert np.all(diff <= rep.delta * V + 1e-12)


@given(st.floats(0.05, 2.0), st.floats(1.0, 3.0))
def test_fluctuation_branch_monotone_in_a(a, factor):
    spec = clamped_lipschitz_rate(1.0, 1.4, 1.0)
    r1 = lipschitz_params(spec, 1.0, a)
    r2 = lipschitz_params(spec, 1.0, a * factor)
    assert r2.F / r2.a <= r1.F / r1.a + 1e-15
