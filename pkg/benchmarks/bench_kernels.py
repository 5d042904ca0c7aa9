"""Time the structural solver and markup inversion on both backends.

    python benchmarks/bench_kernels.py --markets 1000 --repeat 5

The numba path is compiled once before timing.  Both backends must return
the same prices to solver tolerance; the script exits non-zero otherwise.
"""

import argparse
import sys
import time

import numpy as np

from flexmerge import kernels
from flexmerge._backend import HAVE_NUMBA
from flexmerge.datagen import ScenarioConfig, generate


def _best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(n_markets, repeat, method):
    ds = generate(ScenarioConfig(T=n_markets, seed=1))
    lay = ds.layout
    delta0 = ds.delta0()
    cost = ds.true_costs()
    alpha = ds.demand.alpha
    p0 = cost.copy()

    def solve(backend):
        return kernels.solve_structural_flat(delta0, alpha, cost, ds.h_flat, lay.offsets, p0, method=method, backend=backend)

    def invert(backend):
        return kernels.markups_flat(ds.shares, alpha, ds.h_flat, lay.offsets, backend=backend)

    rows = []
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    results = {}
    for b in backends:
        if b == "numba":
            solve(b), invert(b)  # compile
        ts, sol = _best_of(lambda: solve(b), repeat)
        tm, mk = _best_of(lambda: invert(b), repeat)
        results[b] = (sol[0], mk[0])
        rows.append((b, ts, tm))
    print(f"{'backend':<8} {'solve [s]':>10} {'invert [s]':>11}   ({n_markets} markets, method {method})")
    for b, ts, tm in rows:
        print(f"{b:<8} {ts:>10.4f} {tm:>11.5f}")
    if len(rows) == 2:
        print(f"speed-up  {rows[0][1] / rows[1][1]:>9.1f}x {rows[0][2] / rows[1][2]:>10.1f}x")
        dp = np.max(np.abs(results["numpy"][0] - results["numba"][0]))
        dm = np.max(np.abs(results["numpy"][1] - results["numba"][1]))
        print(f"max |price diff| {dp:.2e}, max |markup diff| {dm:.2e}")
        return dp < 1e-5 and dm < 1e-10
    return True


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--markets", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--method", choices=["zeta", "newton", "hybrid"], default="hybrid")
    args = ap.parse_args(argv)
    code = {"zeta": kernels.ZETA, "newton": kernels.NEWTON, "hybrid": kernels.HYBRID}[args.method]
    return 0 if run(args.markets, args.repeat, code) else 1


if __name__ == "__main__":
    sys.exit(main())
