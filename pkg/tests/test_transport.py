import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment, linprog

from renewal import errors
from renewal.model import clamped_lipschitz_rate, constant_rate
from renewal.particles import (
    common_pair_sampler,
    exponential_gaps_sampler,
    independent_pair_sampler,
    simulate_coupled,
    uniform_gaps_sampler,
)
from renewal.transport import (
    CostParams,
    DiscreteMeasure,
    contraction_experiment,
    cost,
    cost_batch,
    cost_matrix,
    exact_mk,
    integerize_masses,
    solve_transport,
    vertex_enumeration_mk,
)

LIP = clamped_lipschitz_rate(1.0, 1.4, 1.0)


def lp_oracle(C, wa, wb):
    n, m = C.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        A[n + j, j::m] = 1
    r = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([wa, wb]), bounds=(0, None), method="highs")
    return r.fun


def random_measures(rng, n, m, N=2):
    X = np.sort(rng.random((n, N)) * 4, axis=1)
    Y = np.sort(rng.random((m, N)) * 4, axis=1)
    wa = rng.random(n) + 0.1
    wb = rng.random(m) + 0.1
    return DiscreteMeasure(X, wa / wa.sum()), DiscreteMeasure(Y, wb / wb.sum())


def test_cost_examples():
    assert cost([1.0, 2.0], [1.0, 2.0], CostParams(1.0, 1.0, 2)) == 0.0
    assert cost([0.0], [1.0], CostParams(1.0, 10.0, 1)) == 0.5
    p = CostParams(1.0, 1.0, 2)
    assert cost([0.0, 0.0], [100.0, 100.0], p) == 0.75 <= p.cap
    with pytest.raises(errors.ArgumentError):
        cost([0.0], [0.0, 1.0], p)
    with pytest.raises(errors.DomainError):
        CostParams(0.0, 1.0, 1)


def test_discrete_measure_validation():
    with pytest.raises(errors.DomainError):
        DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(errors.DomainError):
        DiscreteMeasure([[1.0, 0.5]], [1.0])
    with pytest.raises(errors.ArgumentError):
        DiscreteMeasure([[0.0]], [0.5, 0.5])


def test_integerize_exact_total():
    w = np.array([1 / 3, 1 / 3, 1 / 3])
    a = integerize_masses(w)
    assert a.sum() == 10**12 and a.max() - a.min() <= 1


def test_identical_measures():
    rng = np.random.default_rng(0)
    mu, _ = random_measures(rng, 7, 7)
    r = exact_mk(mu, mu, CostParams(1.0, 1.0, 2))
    assert r.value == 0.0
    # all mass on the diagonal
    assert np.all(r.plan.rows == r.plan.cols)


def test_single_atoms():
    p = CostParams(1.0, 2.0, 2)
    x, y = [0.5, 1.0], [2.0, 2.5]
    r = exact_mk(DiscreteMeasure([x], [1.0]), DiscreteMeasure([y], [1.0]), p)
    assert r.value == pytest.approx(cost(x, y, p), rel=1e-15)


def test_split_example():
    p = CostParams(1.0, 10.0, 1)
    mu = DiscreteMeasure([[0.0], [2.0]], [0.5, 0.5])
    nu = DiscreteMeasure([[1.0]], [1.0])
    assert exact_mk(mu, nu, p).value == pytest.approx(0.5, abs=1e-15)
    assert vertex_enumeration_mk(cost_matrix(mu.atoms, nu.atoms, p), mu.weights, nu.weights) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(8))
def test_against_highs(seed, backend):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 40, size=2)
    mu, nu = random_measures(rng, n, m, N=3)
    p = CostParams(1.0, 1.5, 3)
    r = exact_mk(mu, nu, p, backend)
    assert r.value == pytest.approx(lp_oracle(cost_matrix(mu.atoms, nu.atoms, p), mu.weights, nu.weights),
                                    abs=1e-10)
    assert r.relative_gap <= 1e-9
    ra, rb = r.plan.marginals(n, m)
    assert np.abs(ra - mu.weights).max() <= 1e-10 and np.abs(rb - nu.weights).max() <= 1e-10
    assert r.plan.objective == r.value


@pytest.mark.parametrize("seed", range(20))
def test_against_vertex_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    n, m = rng.integers(1, 7, size=2)
    mu, nu = random_measures(rng, n, m)
    p = CostParams(0.5, 1.0, 2)
    C = cost_matrix(mu.atoms, nu.atoms, p)
    assert exact_mk(mu, nu, p).value == pytest.approx(vertex_enumeration_mk(C, mu.weights, nu.weights), abs=1e-12)


def test_assignment_case():
    rng = np.random.default_rng(5)
    X = np.sort(rng.random((300, 2)) * 3, axis=1)
    Y = np.sort(rng.random((300, 2)) * 3, axis=1)
    p = CostParams(1.0, 1.0, 2)
    C = cost_matrix(X, Y, p)
    r, c = linear_sum_assignment(C)
    got = exact_mk(DiscreteMeasure.empirical(X), DiscreteMeasure.empirical(Y), p).value
    assert got == pytest.approx(C[r, c].mean(), abs=1e-11)


def test_backends_agree():
    rng = np.random.default_rng(9)
    mu, nu = random_measures(rng, 30, 25)
    p = CostParams(1.0, 1.0, 2)
    a = exact_mk(mu, nu, p, "numba")
    b = exact_mk(mu, nu, p, "numpy")
    assert a.value == b.value


def test_size_limits():
    with pytest.raises(errors.SizeError):
        solve_transport(np.zeros((2001, 1)), np.full(2001, 1 / 2001), [1.0])
    with pytest.raises(errors.SizeError):
        vertex_enumeration_mk(np.zeros((7, 2)), np.full(7, 1 / 7), [0.5, 0.5])


def test_plan_csv(tmp_path):
    mu = DiscreteMeasure([[0.0], [2.0]], [0.5, 0.5])
    nu = DiscreteMeasure([[1.0]], [1.0])
    r = exact_mk(mu, nu, CostParams(1.0, 10.0, 1))
    path = tmp_path / "plan.csv"
    r.plan.write_csv(path)
    assert path.read_text().splitlines() == ["i,j,mass,cost", "0,0,0.5,0.5", "1,0,0.5,0.5"]


# properties ------------------------------------------------------------------

triples = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s))


@given(triples, st.integers(1, 6), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_cost_metric_axioms(rng, N, beta, a):
    p = CostParams(beta, a, N)
    x, y, z = (np.sort(rng.random((50, N)) * 5, axis=1) for _ in range(3))
    xy, yx = cost_batch(x, y, p), cost_batch(y, x, p)
    assert np.all(xy == yx)
    assert np.all(cost_batch(x, x, p) == 0)
    assert np.all(xy <= cost_batch(x, z, p) + cost_batch(z, y, p) + 1e-12)
    assert np.all(xy <= p.cap)


@given(triples, st.integers(1, 5), st.floats(0.1, 2.0))
def test_cap_monotone(rng, N, a):
    x = np.sort(rng.random((40, N)) * 5, axis=1)
    y = np.sort(rng.random((40, N)) * 5, axis=1)
    small, big = cost_batch(x, y, CostParams(1.0, a, N)), cost_batch(x, y, CostParams(1.0, 2 * a, N))
    assert np.all(small <= big + 1e-15)
    assert np.all(big <= 2 * small + 1e-12)


@settings(max_examples=25)
@given(triples, st.integers(1, 15), st.integers(1, 15))
def test_mk_bounded_by_product_plan_and_symmetric(rng, n, m):
    mu, nu = random_measures(rng, n, m)
    p = CostParams(1.0, 1.0, 2)
    C = cost_matrix(mu.atoms, nu.atoms, p)
    v = exact_mk(mu, nu, p).value
    assert v <= mu.weights @ C @ nu.weights + 1e-12
    assert v == pytest.approx(exact_mk(nu, mu, p).value, abs=1e-12)


def test_mk_below_empirical_coupling():
    pair = independent_pair_sampler(exponential_gaps_sampler(1.0), uniform_gaps_sampler(0.0, 2.0))
    cens = simulate_coupled(LIP, 4, 400, 2.0, pair, seed=4, snapshot_times=[1.0])
    p = CostParams(1.0, 0.4, 4)
    for t in (0.0, 1.0, 2.0):
        x, y = cens.at(t)
        v = exact_mk(DiscreteMeasure.empirical(x), DiscreteMeasure.empirical(y), p).value
        assert v <= cost_batch(x, y, p).mean() + 1e-12


# contraction experiment -------------------------------------------------------------

def test_experiment_identical_laws_zero():
    rep = contraction_experiment(LIP, CostParams(1.0, 0.4, 4), common_pair_sampler(exponential_gaps_sampler(1.0)),
                                 2000, [1.0, 2.0], seed=1)
    assert all(r.coupled_cost == 0.0 for r in rep.rows)


def test_experiment_constant_rate_decay():
    beta, a = 1.0, 0.5
    pair = independent_pair_sampler(exponential_gaps_sampler(1.0), uniform_gaps_sampler(0.0, 2.0))
    rep = contraction_experiment(constant_rate(1.0), CostParams(beta, a, 4), pair, 50_000,
                                 [0.5, 1.0, 1.5, 2.0, 3.0], seed=2)
    assert rep.delta == 0.0 and rep.gamma == pytest.approx(beta / (1 + beta))
    # allow three standard errors of slack through the log-linear fit
    assert rep.fitted_rate >= rep.gamma * 0.95
    assert rep.holds


def test_experiment_example_n8(tmp_path):
    pair = independent_pair_sampler(exponential_gaps_sampler(1.0), uniform_gaps_sampler(0.0, 2.0))
    rep = contraction_experiment(LIP, CostParams(1.0, 0.4, 8), pair, 100_000, [2.0, 5.0, 10.0], seed=3,
                                 exact_times=[2.0], exact_subsample=300)
    assert rep.gamma == pytest.approx(0.1)
    assert rep.holds and rep.exact_holds
    row = [r for r in rep.rows if r.t == 2.0][0]
    assert not math.isnan(row.exact_mk)
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t,coupled_cost,std_error,bound,exact_mk,N" and len(lines) == 5


def test_experiment_precondition():
    pair = common_pair_sampler(exponential_gaps_sampler(1.0))
    with pytest.raises(errors.PreconditionError, match="a\\*L"):
        contraction_experiment(LIP, CostParams(1.0, 2.0, 4), pair, 10, [1.0])
