"""Compare the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from snode_dmd import _kernels_py as pure

try:
    from snode_dmd import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    A, S, G = (rng.normal(size=(64, 8, 8)) for _ in range(3))
    u = 0.9 + 0.1 * rng.random((100, 100))
    v = 0.1 * rng.random((100, 100))
    F = np.full((100, 100), 0.035)
    U, V = rng.normal(size=(10, 32, 32)), rng.normal(size=(10, 32, 32))
    return {
        "sandwich (64 x 8x8)": lambda m: m.sandwich(A, S),
        "sandwich_grad (64 x 8x8)": lambda m: m.sandwich_grad(A, S, G),
        "grayscott 100x100, 20 steps": lambda m: m.grayscott_steps(u, v, F, 2e-4, 1e-5, 0.065,
                                                                   0.125, 0.01, 20),
        "advect_rk4 500 steps": lambda m: m.advect_rk4(U, V, 1.0, 2.0, 0.01, 500, 0.5,
                                                       2 * np.pi),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(pure), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:32s} {t_py:10.3f} {'n/a':>10s} {'':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
