"""Fixed-binning histograms with associative merge.

Binning convention: bin = floor((v - lo) / (hi - lo) * n_bins), lo inclusive,
hi exclusive; v < lo underflows, v >= hi or NaN overflows.  The fill kernel
has a numba-jitted path and a pure-numpy path producing identical counts;
selection is by the CASA_MINI_KERNEL env var ("numba" | "numpy", default
numba when importable).  benchmarks/kernel_bench.py compares the two.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via CASA_MINI_KERNEL=numpy
    HAS_NUMBA = False


class HistError(ValueError):
    pass


def _fill_counts_numpy(values: np.ndarray, n_bins: int, lo: float, hi: float):
    nan = np.isnan(values)
    under = values < lo
    over = (values >= hi) | nan
    inside = ~(under | over)
    idx = np.floor((values[inside] - lo) / (hi - lo) * n_bins).astype(np.int64)
    # guard against float rounding landing exactly on n_bins for v just below hi
    np.minimum(idx, n_bins - 1, out=idx)
    counts = np.bincount(idx, minlength=n_bins).astype(np.uint64)
    return counts, int(under.sum()), int(over.sum())


if HAS_NUMBA:

    @njit(cache=True)
    def _fill_counts_jit(values, n_bins, lo, hi):  # pragma: no cover - jitted
        counts = np.zeros(n_bins, dtype=np.uint64)
        under = 0
        over = 0
        width = hi - lo
        for v in values:
            if np.isnan(v) or v >= hi:
                over += 1
            elif v < lo:
                under += 1
            else:
                i = int((v - lo) / width * n_bins)
                if i >= n_bins:
                    i = n_bins - 1
                counts[i] += 1
        return counts, under, over

    def _fill_counts_numba(values: np.ndarray, n_bins: int, lo: float, hi: float):
        counts, under, over = _fill_counts_jit(
            np.ascontiguousarray(values, dtype=np.float64), n_bins, lo, hi
        )
        return counts, int(under), int(over)

else:
    _fill_counts_numba = _fill_counts_numpy


def active_kernel() -> str:
    choice = os.environ.get("CASA_MINI_KERNEL", "").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not HAS_NUMBA:
            raise HistError("CASA_MINI_KERNEL=numba but numba is not importable")
        return "numba"
    return "numba" if HAS_NUMBA else "numpy"


def fill_counts(values: np.ndarray, n_bins: int, lo: float, hi: float, kernel: str | None = None):
    impl = _fill_counts_numba if (kernel or active_kernel()) == "numba" else _fill_counts_numpy
    return impl(values, n_bins, lo, hi)


@dataclass
class Histogram:
    name: str
    n_bins: int
    lo: float
    hi: float
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    underflow: int = 0
    overflow: int = 0
    n_filled: int = 0

    def __post_init__(self):
        if self.n_bins < 1:
            raise HistError(f"n_bins must be >= 1, got {self.n_bins}")
        if not self.lo < self.hi:
            raise HistError(f"need lo < hi, got [{self.lo}, {self.hi})")
        if self.counts.shape[0] == 0:
            self.counts = np.zeros(self.n_bins, dtype=np.uint64)
        elif self.counts.shape[0] != self.n_bins:
            raise HistError("counts length does not match n_bins")

    def spec(self) -> tuple:
        return (self.name, self.n_bins, self.lo, self.hi)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_bins": self.n_bins,
            "lo": self.lo,
            "hi": self.hi,
            "counts": [int(c) for c in self.counts],
            "underflow": self.underflow,
            "overflow": self.overflow,
            "n_filled": self.n_filled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Histogram":
        return cls(
            name=d["name"],
            n_bins=int(d["n_bins"]),
            lo=float(d["lo"]),
            hi=float(d["hi"]),
            counts=np.asarray(d["counts"], dtype=np.uint64),
            underflow=int(d["underflow"]),
            overflow=int(d["overflow"]),
            n_filled=int(d["n_filled"]),
        )


def fill_histogram(
    values: np.ndarray, name: str, n_bins: int, lo: float, hi: float, kernel: str | None = None
) -> Histogram:
    h = Histogram(name=name, n_bins=n_bins, lo=lo, hi=hi)
    values = np.asarray(values, dtype=np.float64)
    counts, under, over = fill_counts(values, n_bins, lo, hi, kernel=kernel)
    h.counts = counts
    h.underflow = under
    h.overflow = over
    h.n_filled = values.shape[0]
    return h


def merge_histograms(a: Histogram, b: Histogram) -> Histogram:
    if a.spec() != b.spec():
        raise HistError(f"histogram spec mismatch: {a.spec()} vs {b.spec()}")
    return Histogram(
        name=a.name,
        n_bins=a.n_bins,
        lo=a.lo,
        hi=a.hi,
        counts=a.counts + b.counts,
        underflow=a.underflow + b.underflow,
        overflow=a.overflow + b.overflow,
        n_filled=a.n_filled + b.n_filled,
    )
