"""Benchmark the compiled coordinate-descent kernel against the NumPy fallback.

Times a warm-started penalty path on a design shaped like the simulation
study (near-collinear proxy column included), which is the hot loop of the
replication harness.

Usage: python benchmarks/bench_solver.py [--n 1000] [--p 100] [--n-lambda 100]
"""

import argparse
import time

import numpy as np

import medpath as mp
from medpath import penalized
from medpath.factor_model import fit_factor
from medpath.mediator_model import fit_mediator_model
from medpath.penalized import Problem, default_lambda_grid
from medpath.proxy import build_proxy
from medpath.simulation import SIMULATION_BASIS


def build_problem(n, p, seed=0):
    cfg = mp.SimConfig(n=n, p=p, scenario=1, phi=4.0, n_reps=1, seed=seed)
    d, _ = mp.generate(cfg, 0)
    mfit = fit_mediator_model(d, SIMULATION_BASIS)
    ffit = fit_factor(mfit.residuals, 1)
    prox = build_proxy(d, mfit.residuals, ffit.loading, ffit.uniqueness)
    return d, prox.proxy


def time_path(kernel, d, proxy, n_lambda):
    penalized._kernel = kernel
    prob = Problem(d.y, d.z, d.m, d.x, proxy)
    weights = np.ones(d.p)
    grid = default_lambda_grid(prob, weights, n_lambda=n_lambda)
    start = time.perf_counter()
    beta = np.zeros(prob.d)
    resid = prob.y.copy()
    sweeps = 0
    for lam in grid:
        beta, resid, sw = prob.solve(lam, weights, beta, resid)
        sweeps += sw
    elapsed = time.perf_counter() - start
    return elapsed, sweeps, prob.destandardize(beta)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--p", type=int, default=100)
    ap.add_argument("--n-lambda", type=int, default=100)
    args = ap.parse_args()

    d, proxy = build_problem(args.n, args.p)
    original = penalized._kernel

    from medpath import _cd_numpy

    rows = []
    try:
        from medpath import _cd_fast

        t, sweeps, params_fast = time_path(_cd_fast, d, proxy, args.n_lambda)
        rows.append(("compiled", t, sweeps))
    except ImportError:
        params_fast = None
        print("compiled kernel unavailable; timing the fallback only")
    t, sweeps, params_np = time_path(_cd_numpy, d, proxy, args.n_lambda)
    rows.append(("numpy", t, sweeps))
    penalized._kernel = original

    print(f"\npenalty path: n={args.n} p={args.p} grid={args.n_lambda}")
    print(f"{'backend':>10s} {'seconds':>10s} {'sweeps':>8s}")
    for name, secs, sweeps in rows:
        print(f"{name:>10s} {secs:>10.3f} {sweeps:>8d}")
    if len(rows) == 2:
        print(f"\nspeedup: {rows[1][1] / rows[0][1]:.1f}x")
        gap = np.abs(params_fast.beta2 - params_np.beta2).max()
        print(f"max coefficient difference between backends: {gap:.2e}")


if __name__ == "__main__":
    main()
