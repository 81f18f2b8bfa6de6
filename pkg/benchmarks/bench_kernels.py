"""Time the hot kernels with numba on and off.

Each backend runs in its own interpreter because the switch is read at
import time::

    python benchmarks/bench_kernels.py            # both backends, table
    python benchmarks/bench_kernels.py --repeat 5
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up (compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def child(repeat):
    from varcast import kernels
    from varcast._jit import USE_NUMBA
    from varcast.sim import SimParams, ensure_compiled, run_sim

    rng = np.random.default_rng(0)
    ensure_compiled()
    sim_p = SimParams(population_size=2000, end_day=91, initial_i_prop=0.01, beta=0.9, lambda_antigenic=5e-3)
    levels = np.linspace(0.01, 0.99, 27)
    values = np.sort(rng.gamma(2.0, 10.0, size=(5, 27)), axis=1)
    u = rng.random((100_000, 5))
    sums = rng.random((3, 10, 40))
    loc = rng.integers(0, 10, size=(1000, 10))
    start = rng.integers(0, 40, size=(1000, 10, 9))
    cells = rng.random((3, 4000))
    cell_idx = rng.integers(0, 4000, size=(250, 5400))

    results = {
        "sim 2k hosts x 91 days": _best(lambda: run_sim(sim_p, seed=1, wall_budget=1e9), repeat),
        "inverse-CDF sum 1e5 x 5": _best(lambda: kernels.sum_inverse_cdf(levels, values, u), repeat),
        "block gather 1000 reps": _best(lambda: kernels.gather_block_sums(sums, loc, start), repeat),
        "iid gather 250 reps": _best(lambda: kernels.gather_cells(cells, cell_idx), repeat),
    }
    print(json.dumps({"numba": USE_NUMBA, "seconds": results}))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        child(args.repeat)
        return
    runs = {}
    for flag in ("1", "0"):
        env = {**os.environ, "VARCAST_NUMBA": flag}
        res = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)], env=env,
                             capture_output=True, text=True, check=True)
        runs[flag] = json.loads(res.stdout.strip().splitlines()[-1])["seconds"]
    print(f"{'kernel':28s} {'numba (ms)':>12s} {'fallback (ms)':>14s} {'speedup':>8s}")
    for name, fast in runs["1"].items():
        slow = runs["0"][name]
        print(f"{name:28s} {1e3 * fast:12.2f} {1e3 * slow:14.2f} {slow / fast:8.1f}x")


if __name__ == "__main__":
    main()
