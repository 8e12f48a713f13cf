"""Compare the compiled and numpy stencil kernels.

Usage::

    python benchmarks/bench_kernels.py [--levels 3 4 5 6] [--repeat 20]

Prints one row per level with the median wall time of a single operator
application and of ten Richardson sweeps for each backend, plus the speedup
and the maximum difference between the two results.
"""

import argparse
import statistics
import time

import numpy as np

from convmg import _kernels_py
from convmg.fe import operator_stencil
from convmg.grid import build_hierarchy

try:
    from convmg import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_level(level, repeat, rng):
    m = level.cells_per_side - 1
    ups = np.ascontiguousarray(rng.uniform(0.1, 1.0, (6, m, m)) * level.mesh_size**2 / 6)
    u = rng.standard_normal((m, m))
    f = rng.standard_normal((m, m))
    K = np.ascontiguousarray(operator_stencil(level))
    row = {"level": level.level, "dof": level.dof}
    results = {}
    for name, mod in (("numpy", _kernels_py), ("cython", _kernels_c)):
        if mod is None:
            continue
        row[f"{name}_apply"] = _median_time(lambda: mod.apply_stencil(ups, u, K), repeat)
        row[f"{name}_smooth"] = _median_time(lambda: mod.richardson(u, f, ups, K, 0.5, 10), repeat)
        results[name] = mod.apply_stencil(ups, u, K)
    if len(results) == 2:
        row["max_diff"] = float(np.max(np.abs(results["numpy"] - results["cython"])))
    return row


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--levels", type=int, nargs="+", default=[3, 4, 5, 6])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    if _kernels_c is None:
        print("compiled extension not available; timing the numpy backend only")
    hier = build_hierarchy(5, max(args.levels))
    rng = np.random.default_rng(0)
    header = f"{'level':>5} {'dof':>7} {'numpy apply':>12} {'cython apply':>13} {'numpy smooth':>13} {'cython smooth':>14} {'speedup':>8} {'max diff':>9}"
    print(header)
    for ell in args.levels:
        r = bench_level(hier.level(ell), args.repeat, rng)
        if _kernels_c is None:
            print(f"{r['level']:>5} {r['dof']:>7} {r['numpy_apply'] * 1e3:>10.3f}ms {'-':>13} {r['numpy_smooth'] * 1e3:>11.3f}ms {'-':>14}")
            continue
        speedup = r["numpy_smooth"] / r["cython_smooth"]
        print(f"{r['level']:>5} {r['dof']:>7} {r['numpy_apply'] * 1e3:>10.3f}ms {r['cython_apply'] * 1e3:>11.3f}ms "
              f"{r['numpy_smooth'] * 1e3:>11.3f}ms {r['cython_smooth'] * 1e3:>12.3f}ms {speedup:>7.1f}x {r['max_diff']:>9.1e}")


if __name__ == "__main__":
    main()
