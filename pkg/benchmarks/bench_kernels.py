"""Compare the compiled kernels with the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Prints one line per kernel
with the mean call time of each backend and the speed-up.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from meshfuse import _kernels_py

try:
    from meshfuse import _kernels as _ext
except ImportError:
    _ext = None


def cases(rng: np.random.Generator, n_samples: int):
    x = np.concatenate([rng.normal(size=6), [1.0, 0.0, 0.0, 0.0], rng.normal(scale=0.01, size=6)])
    P = np.eye(15) * 0.01
    acc, gyro = rng.normal(size=3), rng.normal(scale=0.1, size=3)
    q = np.full(15, 1e-6)
    refs = rng.uniform(-5, 5, size=(n_samples, 3))
    groups = rng.integers(0, 2, size=n_samples).astype(np.int64)
    z = rng.uniform(5, 10, size=n_samples)
    p, gamma, beta = np.array([7.0, 1.0, 2.0]), np.zeros(2), np.ones(2)
    n_pts = 200
    ii, jj = np.triu_indices(n_pts, 1)
    ii, jj = ii.astype(np.int64), jj.astype(np.int64)
    order = rng.permutation(ii.size)
    return {
        "imu_step": lambda m: m.imu_step(x, P, acc, gyro, 0.01, q, 9.81),
        "range_model": lambda m: m.range_model(refs, groups, z, p, gamma, beta),
        "range_residuals": lambda m: m.range_residuals(refs, groups, z, p, gamma, beta),
        "greedy_pairs": lambda m: m.greedy_pairs(ii[order], jj[order], n_pts),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--samples", type=int, default=1000, help="rows for the range kernels")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    if _ext is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':<16} {'python [us]':>12} {'cython [us]':>12} {'speed-up':>9}")
    for name, call in cases(rng, args.samples).items():
        def best(mod):
            timer = timeit.Timer(lambda: call(mod))
            n, _ = timer.autorange()
            return min(timer.repeat(args.repeat, n)) / n * 1e6
        t_py = best(_kernels_py)
        if _ext is None:
            print(f"{name:<16} {t_py:12.2f} {'-':>12} {'-':>9}")
        else:
            t_c = best(_ext)
            print(f"{name:<16} {t_py:12.2f} {t_c:12.2f} {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
