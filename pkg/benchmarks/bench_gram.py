"""Gram assembly timing: compiled kernel vs numpy fallback.

    python3 benchmarks/bench_gram.py [--sizes 50 100 200 400] [--repeat 3]

Assembles the u-field Gram matrix of a 2D collocation stencil (values,
partials, Laplacian) for each size and reports the best time per backend
and the max abs difference between them.
"""

import argparse
import time

import numpy as np

from mfggp import _backend
from mfggp.kernels import PeriodicKernelSpec
from mfggp.stationary import stencil_layout


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 400])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _backend._compiled is None:
        print("compiled kernel not available; only the numpy backend will run")
    k = PeriodicKernelSpec(2, 1.41)
    rng = np.random.default_rng(args.seed)
    print(f"{'M':>6} {'features':>9} {'numpy [s]':>10} {'compiled [s]':>13} {'speedup':>8} {'max diff':>10}")
    for M in args.sizes:
        x = rng.random((M, 2)) - 0.5
        fs = stencil_layout(x).features

        def run(backend):
            return _backend.cross_matrix(
                k, fs.points, fs.ops, fs.op_ids, fs.points, fs.ops, fs.op_ids, symmetric=True, backend=backend
            )

        t_np, g_np = best_time(lambda: run("numpy"), args.repeat)
        if _backend._compiled is not None:
            t_c, g_c = best_time(lambda: run("compiled"), args.repeat)
            diff = np.abs(g_np - g_c).max()
            print(f"{M:6d} {len(fs):9d} {t_np:10.4f} {t_c:13.4f} {t_np / t_c:8.1f} {diff:10.2e}")
        else:
            print(f"{M:6d} {len(fs):9d} {t_np:10.4f} {'-':>13} {'-':>8} {'-':>10}")


if __name__ == "__main__":
    main()
