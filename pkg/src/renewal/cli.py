"""Command-line experiment runner.

    renewal <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--threads <n>]

Each experiment prints one ``PASS``/``FAIL`` line per asserted bound and
writes CSV reports (17 significant digits) and binary dumps into the output
directory. Wall-clock information goes to ``run.log`` only, so reports are
byte-identical across runs with the same config and seed.

Exit status: 0 all checks pass, 1 some check fails, 2 config error,
3 runtime error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .config import EXPERIMENTS, ExperimentConfig, load_config
from .doeblin import (
    certify_convergence,
    constants,
    cycle_ratios,
    lower_gamma_regularized,
    recommended_tstar,
    uniform_in_time_bounds,
    write_constants_csv,
)
from .errors import ConfigError, RenewalError
from .grid import dump_field, fmt, l1_distance, marginal, sigma_moment, write_marginal_csv
from .model import lipschitz_params, tail_norm, truncate, uniform_limit_diagnostic
from .particles import dump_states, empirical_marginal, simulate, write_coupled_csv, simulate_coupled
from .solver import (
    SolverConfig,
    analytic_constant_steady,
    doeblin_lower_bound_check,
    evolve,
    steady_state,
    write_trajectory_csv,
)
from .transport import (
    CostParams,
    DiscreteMeasure,
    contraction_experiment,
    cost_matrix,
    exact_mk,
    vertex_enumeration_mk,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


@dataclass
class Check:
    name: str
    passed: bool
    value: float = math.nan
    bound: float = math.nan

    def line(self, prefix=""):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {prefix}{self.name} value={fmt(self.value)} bound={fmt(self.bound)}"


@dataclass
class Outcome:
    name: str
    kind: str
    checks: list = field(default_factory=list)
    error: str = ""
    error_kind: str = ""
    lines: list = field(default_factory=list)
    wall: float = 0.0

    def check(self, name, passed, value=math.nan, bound=math.nan):
        c = Check(name, bool(passed), float(value), float(bound))
        self.checks.append(c)
        self.lines.append(c.line(f"{self.kind}:"))
        return c

    def le(self, name, value, bound):
        return self.check(name, value <= bound, value, bound)

    @property
    def status(self):
        if self.error:
            return "ERROR"
        return "PASS" if all(c.passed for c in self.checks) else "FAIL"

    @property
    def exit_code(self):
        if self.error_kind == "config":
            return EXIT_CONFIG
        if self.error:
            return EXIT_RUNTIME
        return EXIT_OK if self.status == "PASS" else EXIT_FAIL


# experiments ---------------------------------------------------------------------

def _steady_reference(spec, grid, cfg, backend=None):
    return steady_state(spec, grid, cfg.get_float("solver", "steady_tol", 1e-9),
                        cfg.get_float("solver", "steady_max_time", 400.0), backend=backend)


def run_steady(cfg: ExperimentConfig, out: Path, res: Outcome, seed):
    spec = cfg.rate()
    grid = cfg.grid()
    init = cfg.init_field(grid) if cfg.has("init", "kind") else None
    st = steady_state(spec, grid, cfg.get_float("solver", "steady_tol", 1e-9),
                      cfg.get_float("solver", "steady_max_time", 400.0), init=init)
    res.check("converged", st.converged, st.residual, cfg.get_float("solver", "steady_tol", 1e-9))
    a_minus = spec.bounds(grid.N)[0]
    sig = sigma_moment(st.field)
    res.le("sigma_bound", sig, 2.0 / a_minus + 5 * grid.h)
    err = math.nan
    if spec.a_minus == spec.a_plus:
        ref = analytic_constant_steady(grid, spec.a_minus)
        err = l1_distance(st.field, ref)
        res.le("l1_vs_analytic", err, cfg.tol("l1", 3 * grid.h))
    dump_field(out / "steady.bin", st.field)
    write_marginal_csv(out / "steady_marginal.csv", marginal(st.field, min(grid.N, 2)))
    with open(out / "steady_report.csv", "w") as fh:
        fh.write("N,h,M,residual,elapsed,sigma_moment,l1_vs_analytic\n")
        fh.write(",".join([str(grid.N), fmt(grid.h), str(grid.M), fmt(st.residual), fmt(st.elapsed),
                           fmt(sig), fmt(err)]) + "\n")


def _gronwall(sig0, a_minus, t):
    e = math.exp(-a_minus * t / 2.0)
    return e * sig0 + (1.0 - e) * 2.0 / a_minus


def run_solve(cfg, out, res, seed):
    spec = cfg.rate()
    grid = cfg.grid()
    sc = cfg.solver(grid)
    init = cfg.init_field(grid)
    ref = _steady_reference(spec, grid, cfg).field if cfg.get_bool("check", "reference", "true") else None
    traj = evolve(init, spec, sc, reference=ref)
    steps = max(sc.n_steps, 1)
    res.le("mass_drift", float(np.abs(traj.mass - 1.0).max()), 1e-13 * steps)
    res.check("positivity", bool((traj.final.values >= 0).all()), float(traj.final.values.min()), 0.0)
    a_minus = spec.bounds(grid.N)[0]
    slack = max(s - _gronwall(traj.sigma[0], a_minus, t) for t, s in zip(traj.times, traj.sigma))
    res.le("tightness", slack, 5 * grid.h)
    if cfg.get_bool("check", "doeblin_lower", "false"):
        rep = doeblin_lower_bound_check(traj.final, spec, traj.times[-1])
        res.check("doeblin_lower_bound", rep.holds, rep.worst_slack, -5 * grid.h)
    write_trajectory_csv(out / "trajectory.csv", traj)
    dump_field(out / "final.bin", traj.final)
    for t, f in sorted(traj.snapshots.items()):
        dump_field(out / f"snapshot_t{fmt(t)}.bin", f)


def run_hierarchy(cfg, out, res, seed):
    spec = cfg.rate()
    N1 = cfg.get_int("hierarchy", "N1")
    N2 = cfg.get_int("hierarchy", "N2")
    if not 1 <= N1 < N2:
        raise ConfigError(f"{cfg.source}: hierarchy needs 1 <= N1 < N2")
    g2 = cfg.grid(N2)
    sc = cfg.solver(g2)
    init2 = cfg.init_field(g2)
    init1 = marginal(init2, N1)
    snaps = sc.snapshot_times or tuple(float(t) for t in range(1, int(sc.t_end) + 1))
    sc = SolverConfig(sc.dt, sc.t_end, snaps, record_every=max(sc.n_steps, 1), grid=g2)
    tr2 = evolve(init2, spec, sc)
    tr1 = evolve(init1, truncate(spec, N1), SolverConfig(sc.dt, sc.t_end, snaps, record_every=max(sc.n_steps, 1)))
    eps = tail_norm(spec, N1, N2)
    gap0 = l1_distance(marginal(init2, N1), init1)
    h = g2.h
    ub = uniform_in_time_bounds(N1, N2, spec)
    rows = []
    worst = -math.inf
    for t in snaps:
        gap = l1_distance(marginal(tr2.snapshot(t), N1), tr1.snapshot(t))
        bound = gap0 + 2 * eps * t
        worst = max(worst, gap - bound)
        rows.append((t, gap, bound, ub.limsup_bound))
    res.le("linear_growth", worst, 10 * h)
    if cfg.get_bool("hierarchy", "uniform", "false"):
        t, gap = rows[-1][0], rows[-1][1]
        res.le("uniform_in_time", gap, ub.limsup_bound + 10 * h)
    with open(out / "hierarchy.csv", "w") as fh:
        fh.write("t,marginal_gap,linear_bound,uniform_bound\n")
        for r in rows:
            fh.write(",".join(fmt(x) for x in r) + "\n")


def run_doeblin(cfg, out, res, seed):
    Ns = cfg.get_ints("doeblin", "N", "1:20")
    ratios = cfg.get_floats("doeblin", "ratios", "0.5,0.9,1.0")
    a_plus = cfg.get_float("doeblin", "a_plus", 1.0)
    qtol = cfg.tol("quadrature", 1e-10)
    table = []
    worst = math.inf
    for r in ratios:
        for N in Ns:
            rec = recommended_tstar(N, r * a_plus, a_plus)
            c = constants(r * a_plus, a_plus, N, rec.t_star)
            worst = min(worst, c.alpha / c.t_star / rec.rate_bound - 1.0)
            table.append((c, rec))
    res.le("rate_bound_shortfall", -worst, qtol)
    gN = cfg.get_ints("doeblin", "gamma_N", "1:50")
    g = min(lower_gamma_regularized(N, float(N)) for N in gN)
    res.check("incomplete_gamma_half", g >= 0.5, g, 0.5)
    write_constants_csv(out / "constants.csv", table)
    if cfg.get_bool("doeblin", "certify", "false"):
        _certify(cfg, out, res)


def _certify(cfg, out, res):
    spec = cfg.rate()
    grid = cfg.grid()
    sc = cfg.solver(grid)
    h = grid.h
    steady = _steady_reference(spec, grid, cfg)
    init = cfg.init_field(grid)
    a_minus, a_plus = spec.bounds(grid.N)
    rec = recommended_tstar(grid.N, a_minus, a_plus)
    c = constants(a_minus, a_plus, grid.N, rec.t_star)
    per_unit = max(1, int(round(1.0 / h)))
    run = SolverConfig(sc.dt, sc.t_end, record_every=per_unit, grid=grid)
    traj = evolve(init, spec, run, reference=steady.field)
    d0 = traj.l1_to_ref[0]
    pts = [(t, d) for t, d in zip(traj.times, traj.l1_to_ref) if t > 0 and abs(t - round(t)) < 1e-9]
    rep = certify_convergence(pts, c, d0, 10 * h)
    res.le("doeblin_decay", rep.worst_excess, 10 * h)
    series = [(0.0, d0)] + pts
    cr = cycle_ratios([p[0] for p in series], [p[1] for p in series], c.t_star)
    res.le("cycle_contraction", max(cr) if cr else 0.0, 1.0 - c.alpha + 10 * h)
    slack = max(s - _gronwall(traj.sigma[0], a_minus, t) for t, s in zip(traj.times, traj.sigma))
    res.le("tightness", slack, 5 * h)
    res.le("steady_sigma", sigma_moment(steady.field), 2.0 / a_minus + 5 * h)
    with open(out / "certify.csv", "w") as fh:
        fh.write("t,l1_to_steady,doeblin_bound,sigma_moment,sigma_bound\n")
        for t, d, s in zip(traj.times, traj.l1_to_ref, traj.sigma):
            fh.write(",".join(fmt(x) for x in (t, d, c.c * math.exp(-c.lam * t) * d0, s,
                                               _gronwall(traj.sigma[0], a_minus, t))) + "\n")


def run_particles(cfg, out, res, seed):
    spec = cfg.rate()
    N = cfg.get_int("particles", "N")
    M = cfg.get_int("particles", "M")
    t_end = cfg.get_float("particles", "t_end")
    ens = simulate(spec, N, M, t_end, cfg.sampler("init"), seed)
    rates = ens.jumps[-1] / t_end
    se = rates.std(ddof=1) / math.sqrt(M) if M > 1 else 0.0
    lo, hi = spec.bounds(N)
    res.check("jump_rate_in_bounds", lo - 5 * se <= rates.mean() <= hi + 5 * se, rates.mean(), hi)
    dump_states(out / "particles_final.bin", ens.states[-1], t_end)
    if cfg.has_section("grid"):
        grid = cfg.grid()
        K = grid.N
        emp = empirical_marginal(ens.states[-1], K, grid)
        gN = cfg.grid(N)
        st = _steady_reference(spec, gN, cfg)
        ref = marginal(st.field, K)
        d = l1_distance(emp, ref)
        res.le("l1_vs_steady", d, cfg.tol("l1", 0.02))
        if K <= 2:
            write_marginal_csv(out / "empirical_marginal.csv", emp)
    with open(out / "jumps.csv", "w") as fh:
        fh.write("t,mean_jump_count,mean_jump_rate\n")
        for k, t in enumerate(ens.times):
            mj = ens.jumps[k].mean()
            fh.write(",".join(fmt(x) for x in (t, mj, mj / t if t > 0 else 0.0)) + "\n")


def run_couple(cfg, out, res, seed):
    spec = cfg.rate()
    Ns = cfg.get_ints("transport", "N")
    beta = cfg.get_float("transport", "beta")
    a = cfg.get_float("transport", "a")
    M = cfg.get_int("particles", "M")
    checkpoints = cfg.get_floats("particles", "t_checkpoints")
    exact_times = cfg.get_floats("particles", "exact_times", "")
    sub = cfg.get_int("particles", "exact_subsample", 1000)
    sampler = cfg.pair_sampler()
    rates = []
    first = True
    for N in Ns:
        rep = contraction_experiment(spec, CostParams(beta, a, N), sampler, M, checkpoints, seed,
                                     exact_times=exact_times, exact_subsample=sub)
        for r in rep.rows:
            if r.t > 0 and any(abs(r.t - u) < 1e-9 for u in checkpoints):
                res.check(f"N{N}.t{fmt(r.t)}.contraction", r.within_bound, r.coupled_cost,
                          r.bound + 3 * r.std_error)
            if not math.isnan(r.exact_mk):
                res.check(f"N{N}.t{fmt(r.t)}.exact_below_coupling", r.exact_ok, r.exact_mk,
                          r.subsample_cost + 3 * r.subsample_se)
        rates.append(rep.fitted_rate)
        rep.write_csv(out / "contraction.csv", append=not first)
        first = False
    if len(rates) > 1:
        var = max(rates) / min(rates) - 1.0
        res.le("rate_variation", var, cfg.tol("rate_variation", 0.25))
    with open(out / "rates.csv", "w") as fh:
        fh.write("N,fitted_rate\n")
        for N, r in zip(Ns, rates):
            fh.write(f"{N},{fmt(r)}\n")
    lip = lipschitz_params(spec, beta, a)
    with open(out / "lipschitz.csv", "w") as fh:
        fh.write("beta,a,L,F,delta,gamma,admissible\n")
        fh.write(",".join([fmt(beta), fmt(a), fmt(lip.L), fmt(lip.F), fmt(lip.delta), fmt(lip.gamma),
                           str(int(lip.admissible))]) + "\n")
    if cfg.get_bool("particles", "dump_csv", "false"):
        cens = simulate_coupled(spec, Ns[0], M, max(checkpoints), sampler, seed, snapshot_times=checkpoints)
        write_coupled_csv(out / "coupled_series.csv", cens, beta, a)


def random_instance(rng, n, m, N, scale=5.0):
    X = np.sort(rng.random((n, N)) * scale, axis=1)
    Y = np.sort(rng.random((m, N)) * scale, axis=1)
    wa = rng.random(n) + 0.05
    wb = rng.random(m) + 0.05
    return DiscreteMeasure(X, wa / wa.sum()), DiscreteMeasure(Y, wb / wb.sum())


def run_mk_exact(cfg, out, res, seed):
    n_inst = cfg.get_int("mk", "instances", 100)
    max_atoms = cfg.get_int("mk", "max_atoms", 50)
    enum_atoms = cfg.get_int("mk", "enum_atoms", 6)
    N = cfg.get_int("transport", "N", 2)
    params = CostParams(cfg.get_float("transport", "beta", 1.0), cfg.get_float("transport", "a", 1.0), N)
    rng = np.random.default_rng(seed)
    worst_enum = 0.0
    worst_gap = 0.0
    worst_feas = 0.0
    rows = []
    for k in range(n_inst):
        hi = enum_atoms if k % 2 == 0 else max_atoms
        n, m = (int(x) for x in rng.integers(1, hi + 1, size=2))
        mu, nu = random_instance(rng, n, m, N)
        r = exact_mk(mu, nu, params)
        ra, rb = r.plan.marginals(n, m)
        feas = max(np.abs(ra - mu.weights).max(), np.abs(rb - nu.weights).max())
        worst_feas = max(worst_feas, feas)
        oracle = math.nan
        if max(n, m) <= enum_atoms:
            oracle = vertex_enumeration_mk(cost_matrix(mu.atoms, nu.atoms, params), mu.weights, nu.weights,
                                           enum_atoms)
            worst_enum = max(worst_enum, abs(oracle - r.value))
        else:
            worst_gap = max(worst_gap, r.relative_gap)
        rows.append((k, n, m, r.value, oracle, r.relative_gap, feas))
    res.le("matches_vertex_enumeration", worst_enum, cfg.tol("enum", 1e-12))
    res.le("duality_gap", worst_gap, cfg.tol("gap", 1e-9))
    res.le("plan_feasibility", worst_feas, 1e-10)
    with open(out / "mk_instances.csv", "w") as fh:
        fh.write("instance,n,m,value,enumeration,relative_gap,feasibility\n")
        for k, n, m, v, o, g, f in rows:
            fh.write(f"{k},{n},{m},{fmt(v)},{fmt(o)},{fmt(g)},{fmt(f)}\n")


def run_uniform_limit(cfg, out, res, seed):
    spec = cfg.rate()
    Ns = cfg.get_ints("uniform", "N", "1:30")
    diag = uniform_limit_diagnostic(spec, Ns)
    if cfg.has("check", "expect"):
        want = cfg.get_str("check", "expect").strip().lower()
        if want not in ("holds", "fails"):
            raise ConfigError(f"{cfg.source}: check.expect must be 'holds' or 'fails'")
        res.check("trend", diag.holds == (want == "holds"), diag.ratio_limit, 1.0)
    with open(out / "uniform_limit.csv", "w") as fh:
        fh.write("N,r_N\n")
        for N, r in diag.rows:
            fh.write(f"{N},{fmt(r)}\n")


RUNNERS = {
    "solve": run_solve,
    "steady": run_steady,
    "hierarchy": run_hierarchy,
    "doeblin": run_doeblin,
    "particles": run_particles,
    "couple": run_couple,
    "mk-exact": run_mk_exact,
    "uniform-limit": run_uniform_limit,
}


# driver ------------------------------------------------------------------------------

def run(config_path, out_dir, seed=None, subcommand=None) -> Outcome:
    """Run one config; never raises for library errors, they land in the outcome."""
    name = Path(config_path).stem
    res = Outcome(name, subcommand or "?")
    t0 = time.perf_counter()
    try:
        cfg = load_config(config_path)
        kind = cfg.kind if cfg.has("", "experiment") else subcommand
        if kind is None:
            raise ConfigError(f"{config_path}: no experiment kind given")
        if subcommand and kind != subcommand:
            raise ConfigError(f"{config_path}: config is a {kind!r} experiment, not {subcommand!r}")
        res.kind = kind
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        RUNNERS[kind](cfg, out, res, cfg.seed(seed))
    except ConfigError as exc:
        res.error, res.error_kind = f"CONFIG ERROR: {exc}", "config"
    except RenewalError as exc:
        res.error, res.error_kind = f"RUNTIME ERROR ({type(exc).__name__}): {exc}", "runtime"
    except (ValueError, OSError) as exc:
        res.error, res.error_kind = f"RUNTIME ERROR ({type(exc).__name__}): {exc}", "runtime"
    res.wall = time.perf_counter() - t0
    if res.error:
        res.lines.append(res.error)
    return res


def _log(out_dir, message):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(out / "run.log", "a") as fh:
        fh.write(f"{stamp} {message}\n")


def verify_all(config_dir, out_dir, seed=None, workers=1):
    """Run every ``*.cfg`` in a directory; returns (outcomes, exit status)."""
    paths = sorted(Path(config_dir).glob("*.cfg"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(p, out / p.stem) for p in paths]
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda j: run(j[0], j[1], seed), jobs))
    else:
        outcomes = [run(p, o, seed) for p, o in jobs]
    with open(out / "summary.csv", "w") as fh:
        fh.write("config,experiment,status,checks_passed,checks_failed,message\n")
        for r in outcomes:
            n_ok = sum(c.passed for c in r.checks)
            msg = r.error.replace(",", ";").replace("\n", " ")
            fh.write(f"{r.name},{r.kind},{r.status},{n_ok},{len(r.checks) - n_ok},{msg}\n")
    for r in outcomes:
        _log(out, f"{r.name} {r.kind} {r.status} wall={r.wall:.3f}s")
    code = EXIT_OK
    if any(r.status != "PASS" for r in outcomes):
        code = max(r.exit_code for r in outcomes if r.status != "PASS")
        code = EXIT_FAIL if code == EXIT_OK else code
    return outcomes, code


def build_parser():
    ap = argparse.ArgumentParser(prog="renewal", description="N-times renewal equation experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in (*EXPERIMENTS, "verify-all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config file (directory for verify-all)")
        p.add_argument("--out", default=None, help="output directory (default: ./out/<config name>)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="kernel threads (or RENEWAL_THREADS)")
        if name == "verify-all":
            p.add_argument("--workers", type=int, default=1, help="experiments run concurrently")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    _backend.set_threads(args.threads)
    if args.command == "verify-all":
        out = args.out or "out/verify-all"
        outcomes, code = verify_all(args.config, out, args.seed, args.workers)
        for r in outcomes:
            for line in r.lines:
                print(f"[{r.name}] {line}")
        n_ok = sum(r.status == "PASS" for r in outcomes)
        print(f"{n_ok}/{len(outcomes)} configs passed")
        return code
    out = args.out or f"out/{Path(args.config).stem}"
    res = run(args.config, out, args.seed, args.command)
    for line in res.lines:
        print(line)
    _log(out, f"{res.name} {res.kind} {res.status} wall={res.wall:.3f}s")
    return res.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
