import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from renewal import errors
from renewal.grid import DensityField, GapGrid, init_density, l1_distance, marginal
from renewal.model import clamped_lipschitz_rate, constant_rate, geometric_constant_rate, tail_norm, truncate
from renewal.solver import (
    SolverConfig,
    Stepper,
    analytic_constant_steady,
    boundary_flux,
    check_domination,
    doeblin_lower_bound_check,
    evolve,
    solve_inflated,
    steady_state,
    step,
    write_trajectory_csv,
)

SPECS = [constant_rate(1.0), geometric_constant_rate(1.0, 0.5), clamped_lipschitz_rate(1.0, 1.4, 1.0)]


def random_field(seed, N, M=8, h=0.25):
    g = GapGrid(N, h, M)
    r = np.random.default_rng(seed)
    v = r.random(g.shape) * (r.random(g.shape) < 0.6)
    v.flat[0] += 1e-3
    return DensityField(g, v / v.sum())


def test_dt_must_equal_h():
    g = GapGrid(1, 0.05, 20)
    with pytest.raises(errors.ConfigError, match="dt = h"):
        SolverConfig(0.1, 1.0, grid=g)
    with pytest.raises(errors.ConfigError):
        step(init_density(g, "dirac", ages=[0.0]), constant_rate(1.0), 0.04)
    with pytest.raises(errors.ConfigError):
        SolverConfig(0.05, 1.0, snapshot_times=(0.33,))


def test_cohort_survival(backend):
    g = GapGrid(1, 0.05, 200)
    f = init_density(g, "dirac", ages=[0.0])
    traj = evolve(f, constant_rate(1.0), SolverConfig(0.05, 3.0), backend=backend)
    k = 60
    # the cohort sits k cells out and has not renewed yet
    assert traj.final.values[k] == pytest.approx(math.exp(-3.0), abs=0.05)
    assert traj.final.values[k] == pytest.approx(math.exp(-3.0), rel=1e-12)


def test_steady_is_fixed_point():
    g = GapGrid(2, 0.05, 200)
    ref = analytic_constant_steady(g, 1.0)
    traj = evolve(ref, constant_rate(1.0), SolverConfig(0.05, 10.0, record_every=20), reference=ref)
    assert traj.l1_to_ref.max() <= 10 * g.h
    assert traj.l1_to_ref.max() < 1e-12


@pytest.mark.parametrize("N,h,M", [(1, 0.05, 200), (2, 0.05, 200), (3, 0.1, 60)])
def test_steady_state_matches_closed_form(N, h, M):
    g = GapGrid(N, h, M)
    res = steady_state(constant_rate(1.0), g, 1e-10, 400.0,
                       init=init_density(g, "uniform-box", lo=0.0, hi=2.0))
    assert res.converged
    assert l1_distance(res.field, analytic_constant_steady(g, 1.0)) <= 3 * h


def test_analytic_reference_mass():
    assert analytic_constant_steady(GapGrid(3, 0.05, 200), 1.0).mass == pytest.approx(1.0, abs=1e-13)


def test_steady_timeout_returns_iterate():
    g = GapGrid(2, 0.05, 100)
    res = steady_state(constant_rate(1.0), g, 1e-14, 2.0, init=init_density(g, "dirac", ages=[1.0, 2.0]))
    assert not res.converged
    assert res.elapsed == pytest.approx(2.0)
    assert math.isfinite(res.residual) and res.field.mass == pytest.approx(1.0)


def test_boundary_flux():
    g = GapGrid(2, 0.05, 200)
    flux = boundary_flux(analytic_constant_steady(g, 1.0), constant_rate(1.0))
    assert l1_distance(flux, init_density(g.sub(1), "product-exponential", rate=1.0)) <= 2 * g.h
    zero = DensityField(g, np.zeros(g.shape))
    assert not boundary_flux(zero, constant_rate(1.0)).values.any()
    assert boundary_flux(DensityField(g.sub(1), np.zeros(200)), constant_rate(1.0)) == 0.0


def test_inflated_without_eps_is_steady():
    g = GapGrid(1, 0.05, 200)
    a = solve_inflated(constant_rate(1.0), 1, 0.0, g, tol=1e-12)
    b = steady_state(constant_rate(1.0), g, 1e-12, init=init_density(g, "product-exponential", rate=1.0))
    assert a.growth_factor == pytest.approx(1.0, abs=1e-12)
    assert l1_distance(a.field, b.field) < 1e-10


def test_inflated_growth_factor():
    g = GapGrid(1, 0.05, 200)
    r = solve_inflated(constant_rate(1.0), 1, 0.1, g, tol=1e-12)
    assert r.converged
    assert r.growth_factor == pytest.approx(math.exp(0.1), abs=2 * g.h)
    with pytest.raises(errors.ArgumentError):
        solve_inflated(constant_rate(1.0), 2, 0.1, g)


def test_doeblin_lower_bound_equality_case():
    g = GapGrid(1, 0.05, 200)
    f = init_density(g, "dirac", ages=[5.0])
    out = evolve(f, constant_rate(1.0), SolverConfig(0.05, 1.0)).final
    j = 9  # cell centered at s = 0.475, next to 0.5
    assert out.density()[j] == pytest.approx(math.exp(-0.5), abs=2 * g.h)
    rep = doeblin_lower_bound_check(out, constant_rate(1.0), 1.0)
    assert rep.holds and abs(rep.worst_slack) <= 5 * g.h


def test_doeblin_lower_bound_uniform_box():
    g = GapGrid(2, 0.05, 120)
    f = init_density(g, "uniform-box", lo=0.0, hi=2.0)
    out = evolve(f, constant_rate(1.0), SolverConfig(0.05, 3.0)).final
    rep = doeblin_lower_bound_check(out, constant_rate(1.0), 3.0)
    assert rep.holds and rep.worst_slack > 0 and rep.n_cells > 0


def test_domination_propagates():
    spec = geometric_constant_rate(1.0, 0.5)
    g = GapGrid(2, 0.1, 60)
    rep = check_domination(spec, init_density(g, "product-exponential", rate=1.0), 1, 5.0)
    assert rep.eps == pytest.approx(0.25)
    assert rep.holds and math.isfinite(rep.C_K)


def test_backends_agree():
    f = random_field(7, 3, M=20, h=0.1)
    spec = clamped_lipschitz_rate(1.0, 1.4, 1.0)
    a = step(f, spec, 0.1, backend="numba").values
    b = step(f, spec, 0.1, backend="numpy").values
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-18)


def test_trajectory_csv(tmp_path):
    g = GapGrid(1, 0.5, 10)
    traj = evolve(init_density(g, "dirac", ages=[0.0]), constant_rate(1.0), SolverConfig(0.5, 1.0))
    p = tmp_path / "t.csv"
    write_trajectory_csv(p, traj)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,mass,sigma_moment,l1_to_steady"
    assert len(lines) == 4 and lines[3].startswith("1,")


def test_snapshots_recorded():
    g = GapGrid(1, 0.5, 10)
    traj = evolve(init_density(g, "dirac", ages=[0.0]), constant_rate(1.0),
                  SolverConfig(0.5, 2.0, snapshot_times=(0.0, 1.0, 2.0), record_every=4))
    assert set(traj.snapshots) == {0.0, 1.0, 2.0}
    np.testing.assert_array_equal(traj.snapshot(2.0).values, traj.final.values)
    with pytest.raises(KeyError):
        traj.snapshot(1.5)


# properties ------------------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.sampled_from(SPECS), st.sampled_from(["numba", "numpy"]))
def test_mass_conservation_and_positivity(seed, N, spec, backend):
    f = random_field(seed, N)
    out = step(f, spec, f.grid.h, backend)
    assert abs(out.mass - f.mass) <= 1e-13 * f.mass
    assert np.all(out.values >= 0)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(1, 3), st.sampled_from(SPECS))
def test_l1_contraction(s1, s2, N, spec):
    f, g = random_field(s1, N), random_field(s2, N)
    before = l1_distance(f, g)
    after = l1_distance(step(f, spec, f.grid.h), step(g, spec, g.grid.h))
    assert after <= before + 1e-14


@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.data())
def test_commutation_with_marginal(seed, N, data):
    spec = geometric_constant_rate(1.0, 0.5)
    K = data.draw(st.integers(1, N - 1))
    f = random_field(seed, N)
    h = f.grid.h
    lhs = marginal(step(f, spec, h), K)
    rhs = step(marginal(f, K), truncate(spec, K), h)
    eps = tail_norm(spec, K, N)
    assert l1_distance(lhs, rhs) <= 2 * (1 - math.exp(-eps * h)) + 1e-14
    assert l1_distance(lhs, rhs) <= 2 * eps * h


def test_hierarchy_error_growth():
    spec = geometric_constant_rate(1.0, 0.5)
    g3 = GapGrid(3, 0.1, 60)
    f3 = init_density(g3, "product-exponential", rate=1.0)
    f2 = marginal(f3, 2)
    snaps = tuple(float(t) for t in range(1, 11))
    t3 = evolve(f3, spec, SolverConfig(0.1, 10.0, snaps, record_every=100))
    t2 = evolve(f2, truncate(spec, 2), SolverConfig(0.1, 10.0, snaps, record_every=100))
    eps = tail_norm(spec, 2, 3)
    for t in snaps:
        gap = l1_distance(marginal(t3.snapshot(t), 2), t2.snapshot(t))
        assert gap <= 2 * eps * t + 10 * g3.h


def test_stepper_reuse_matches_step():
    f = random_field(3, 2)
    spec = SPECS[2]
    st_ = Stepper(spec, f.grid)
    np.testing.assert_array_equal(st_.advance(f.values), step(f, spec, f.grid.h).values)
