"""Time one full likelihood evaluation with the numba kernel and the numpy path.

    python benchmarks/bench_filter.py [--horizon 200] [--repeats 5]

Both backends run on the same synthetic eleven-region series; the script
reports the best wall time of each, the speed-up, and the largest relative
difference in the filtered means so the two paths are checked as well as timed.
"""

import argparse
import time

import numpy as np

from metaseird import EpiParams, EpsilonSet, TestParams, gravity_coupling
from metaseird.data import generate_synthetic, texas_regions
from metaseird.ukf import filter_series


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    regions = texas_regions()
    params = EpiParams(0.4, 0.1, 1 / 14, 0.01)
    tests = TestParams(0.01, 0.85, 10 / 3, 0.2)
    eps = EpsilonSet.from_tests(0.03, 0.1, tests)
    coupling = gravity_coupling(regions)
    seeds = np.zeros(len(regions), dtype=np.int64)
    seeds[0] = 5
    _, series = generate_synthetic(regions, params, tests, eps, args.horizon, args.seed, seeds, coupling)

    def run(backend):
        return filter_series(series.obs, params, tests, coupling, regions, prior_eps=eps, backend=backend)

    t0 = time.perf_counter()
    run("numba")
    first = time.perf_counter() - t0

    t_jit, res_jit = best_time(lambda: run("numba"), args.repeats)
    t_np, res_np = best_time(lambda: run("numpy"), max(1, args.repeats // 2))

    scale = np.maximum(np.abs(res_np.means), 1.0)
    drift = float(np.max(np.abs(res_jit.means - res_np.means) / scale))
    print(f"series: {args.horizon} steps x {len(regions)} regions")
    print(f"numba first call (compile or cache load): {first:.3f} s")
    print(f"numba  best of {args.repeats}: {t_jit * 1e3:9.2f} ms")
    print(f"numpy  best of {max(1, args.repeats // 2)}: {t_np * 1e3:9.2f} ms")
    print(f"speed-up: {t_np / t_jit:.1f}x")
    print(f"loglik numba {res_jit.loglik:.6f}  numpy {res_np.loglik:.6f}")
    print(f"max relative mean difference: {drift:.2e}")


if __name__ == "__main__":
    main()
