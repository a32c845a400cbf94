#!/usr/bin/env python3
"""Compare the numba and numpy histogram-fill kernels.

Run:  python benchmarks/kernel_bench.py [n_values] [repeats]

The jitted path is warmed before timing.  Both paths must produce identical
counts; the benchmark asserts that while it measures.
"""

import sys
import time

import numpy as np

from casa_mini.engine.hist import HAS_NUMBA, fill_counts


def bench(kernel: str, values: np.ndarray, n_bins: int, lo: float, hi: float, repeats: int):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fill_counts(values, n_bins, lo, hi, kernel=kernel)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main() -> int:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 5_000_000
    repeats = int(sys.argv[2]) if len(sys.argv) > 2 else 5
    rng = np.random.default_rng(42)
    values = rng.normal(50.0, 40.0, n)
    values[rng.integers(0, n, n // 1000)] = np.nan
    n_bins, lo, hi = 60, 0.0, 300.0

    if HAS_NUMBA:
        fill_counts(values[:1000], n_bins, lo, hi, kernel="numba")  # compile

    t_np, r_np = bench("numpy", values, n_bins, lo, hi, repeats)
    print(f"numpy : {n / t_np / 1e6:8.1f} Mev/s  ({t_np * 1e3:7.2f} ms best of {repeats})")
    if HAS_NUMBA:
        t_nb, r_nb = bench("numba", values, n_bins, lo, hi, repeats)
        print(f"numba : {n / t_nb / 1e6:8.1f} Mev/s  ({t_nb * 1e3:7.2f} ms best of {repeats})")
        assert np.array_equal(r_np[0], r_nb[0]) and r_np[1:] == r_nb[1:], "kernel mismatch"
        print(f"speedup: {t_np / t_nb:.2f}x (identical counts)")
    else:
        print("numba not importable; numpy path only")
    return 0


if __name__ == "__main__":
    sys.exit(main())
