"""Wall-clock comparison of the numba kernels and their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick] [--csv out.csv]

Each kernel runs once untimed (JIT compile) and is then timed ``--repeat``
times; the best time is reported.
"""
import argparse
import time

import numpy as np

from renewal.grid import GapGrid, init_density
from renewal.model import clamped_lipschitz_rate, constant_rate
from renewal.particles import exponential_gaps_sampler, independent_pair_sampler, simulate, simulate_coupled
from renewal.solver import Stepper
from renewal.transport import CostParams, DiscreteMeasure, exact_mk

LIP = clamped_lipschitz_rate(1.0, 1.4, 1.0)


def bench_step(backend, quick):
    g = GapGrid(3, 0.05, 120 if quick else 200)
    st = Stepper(constant_rate(1.0), g, backend=backend)
    v = init_density(g, "uniform-box", lo=0.0, hi=2.0).values
    out = np.empty(v.size)

    def run():
        st.advance(v, out)

    return run, f"solver step N=3 M={g.M}"


def bench_single(backend, quick):
    M = 100_000 if quick else 1_000_000

    def run():
        simulate(constant_rate(1.0), 2, M, 20.0, exponential_gaps_sampler(1.0), seed=1, backend=backend)

    return run, f"thinning M={M} N=2 t=20"


def bench_coupled(backend, quick):
    M = 20_000 if quick else 100_000
    pair = independent_pair_sampler(exponential_gaps_sampler(1.0), exponential_gaps_sampler(0.5))

    def run():
        simulate_coupled(LIP, 8, M, 10.0, pair, seed=2, backend=backend)

    return run, f"coupled thinning M={M} N=8 t=10"


def bench_mk(backend, quick):
    n = 200 if quick else 600
    rng = np.random.default_rng(0)
    mu = DiscreteMeasure.empirical(np.sort(rng.random((n, 4)) * 5, axis=1))
    nu = DiscreteMeasure.empirical(np.sort(rng.random((n, 4)) * 5, axis=1))

    def run():
        exact_mk(mu, nu, CostParams(1.0, 0.4, 4), backend)

    return run, f"exact MK {n}x{n}"


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)
    rows = []
    print(f"{'kernel':36s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s}")
    for make in (bench_step, bench_single, bench_coupled, bench_mk):
        res = {}
        for backend in ("numba", "numpy"):
            fn, label = make(backend, args.quick)
            res[backend] = best_of(fn, args.repeat)
        speedup = res["numpy"] / res["numba"]
        rows.append((label, res["numba"], res["numpy"], speedup))
        print(f"{label:36s} {res['numba']:10.4f} {res['numpy']:10.4f} {speedup:8.1f}x")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("kernel,numba_seconds,numpy_seconds,speedup\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]:.6g},{r[2]:.6g},{r[3]:.4g}\n")


if __name__ == "__main__":
    main()
