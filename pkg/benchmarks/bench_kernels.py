"""Compare the numba and pure-numpy backends of the hot kernels.

Times the anisotropic square-root kernel build (with derivatives) on the
30 x 15 grid and one full waterflood run, checks both backends agree, and
prints a small table.

Run: python benchmarks/bench_kernels.py --repeats 5
"""

import argparse
import time

import numpy as np

from hierda import _kernels
from hierda.covariance import AnisoParams, KernelFamily, build_L
from hierda.field_model import GridSpec
from hierda.flow import default_flow_model, simulate_flow


def best_of(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    grid = GridSpec((30, 15), (1 / 30, 1 / 30))
    fam = KernelFamily("gaussian2d", 2.0)
    p = AnisoParams(1.0, 6.0, 0.93)
    model = default_flow_model(grid, t_end=0.5)
    rng = np.random.default_rng(args.seed)
    lnK = build_L(grid, fam, p).L @ rng.standard_normal(grid.size)

    backends = ["numpy"] + (["numba"] if _kernels.NUMBA_AVAILABLE else [])
    results = {}
    for b in backends:
        # first call compiles under numba; keep it out of the timings
        build_L(grid, fam, p, derivatives=True, backend=b)
        simulate_flow(lnK, model, backend=b)
        t_cov, cov = best_of(lambda: build_L(grid, fam, p, derivatives=True, backend=b), args.repeats)
        t_flow, res = best_of(lambda: simulate_flow(lnK, model, backend=b), args.repeats)
        results[b] = (t_cov, t_flow, cov, res)

    print(f"{'backend':<8} {'build_L+dL [ms]':>16} {'waterflood [ms]':>16}")
    for b, (t_cov, t_flow, _, _) in results.items():
        print(f"{b:<8} {1e3 * t_cov:16.2f} {1e3 * t_flow:16.2f}")
    if len(results) == 2:
        (tc0, tf0, c0, r0), (tc1, tf1, c1, r1) = results["numpy"], results["numba"]
        dl = max(np.max(np.abs(c0.L - c1.L)), *(np.max(np.abs(c0.derivatives[k] - c1.derivatives[k])) for k in c0.derivatives))
        dw = np.max(np.abs(r0.watercut - r1.watercut))
        print(f"speedup  {tc0 / tc1:16.2f}x {tf0 / tf1:16.2f}x")
        print(f"max |numpy - numba|: kernel {dl:.2e}, water cut {dw:.2e}")
    else:
        print("numba is not installed; only the numpy backend was timed")


if __name__ == "__main__":
    main()
