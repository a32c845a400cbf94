import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casa_mini.engine.hist import (
    HAS_NUMBA,
    HistError,
    Histogram,
    fill_counts,
    fill_histogram,
    merge_histograms,
)


def test_fill_basic():
    h = fill_histogram(np.array([1.0, 3.0, 5.0, 7.0]), "h", 2, 0.0, 8.0)
    assert list(h.counts) == [2, 2]
    assert h.underflow == 0 and h.overflow == 0 and h.n_filled == 4


def test_fill_boundaries_hi_exclusive():
    h = fill_histogram(np.array([-1.0, 8.0]), "h", 2, 0.0, 8.0)
    assert list(h.counts) == [0, 0]
    assert h.underflow == 1 and h.overflow == 1
    # lo lands in the first bin, hi overflows
    h2 = fill_histogram(np.array([0.0, 7.999999]), "h", 2, 0.0, 8.0)
    assert list(h2.counts) == [1, 1]


def test_fill_nan_overflows():
    h = fill_histogram(np.array([math.nan]), "h", 4, 0.0, 1.0)
    assert h.overflow == 1 and h.n_filled == 1 and sum(h.counts) == 0


def test_invalid_spec():
    with pytest.raises(HistError):
        fill_histogram(np.array([1.0]), "h", 0, 0.0, 1.0)
    with pytest.raises(HistError):
        fill_histogram(np.array([1.0]), "h", 4, 1.0, 1.0)


def test_merge_and_identity():
    a = fill_histogram(np.array([1.0, 3.0]), "h", 2, 0.0, 4.0)
    b = fill_histogram(np.array([3.5]), "h", 2, 0.0, 4.0)
    m = merge_histograms(a, b)
    assert list(m.counts) == [1, 2] and m.n_filled == 3
    empty = Histogram(name="h", n_bins=2, lo=0.0, hi=4.0)
    m2 = merge_histograms(a, empty)
    assert list(m2.counts) == list(a.counts)
    assert m2.underflow == a.underflow and m2.n_filled == a.n_filled


def test_merge_spec_mismatch():
    a = Histogram(name="h", n_bins=2, lo=0.0, hi=4.0)
    b = Histogram(name="h", n_bins=3, lo=0.0, hi=4.0)
    with pytest.raises(HistError, match="spec mismatch"):
        merge_histograms(a, b)


def test_dict_round_trip():
    h = fill_histogram(np.array([0.5, 2.5, math.nan, -3.0]), "pt", 4, 0.0, 4.0)
    back = Histogram.from_dict(h.to_dict())
    assert back.spec() == h.spec()
    assert np.array_equal(back.counts, h.counts)
    assert (back.underflow, back.overflow, back.n_filled) == (h.underflow, h.overflow, h.n_filled)


values_strategy = st.lists(
    st.one_of(
        st.floats(min_value=-50.0, max_value=350.0, allow_nan=False),
        st.just(math.nan),
        st.just(math.inf),
        st.just(-math.inf),
    ),
    max_size=200,
)

spec_strategy = st.tuples(
    st.integers(min_value=1, max_value=50),
    st.floats(min_value=-100.0, max_value=100.0, allow_nan=False),
    st.floats(min_value=0.1, max_value=300.0, allow_nan=False),
)


@settings(max_examples=150, deadline=None)
@given(values=values_strategy, spec=spec_strategy)
def test_count_conservation(values, spec):
    n_bins, lo, width = spec
    arr = np.asarray(values, dtype=np.float64)
    h = fill_histogram(arr, "h", n_bins, lo, lo + width)
    assert int(h.counts.sum()) + h.underflow + h.overflow == h.n_filled == len(values)


@settings(max_examples=60, deadline=None)
@given(values=values_strategy, spec=spec_strategy, cut=st.integers(min_value=0, max_value=200))
def test_merge_associative_commutative(values, spec, cut):
    n_bins, lo, width = spec
    hi = lo + width
    arr = np.asarray(values, dtype=np.float64)
    i = min(cut, len(arr))
    j = min(i + (len(arr) - i) // 2, len(arr))
    a = fill_histogram(arr[:i], "h", n_bins, lo, hi)
    b = fill_histogram(arr[i:j], "h", n_bins, lo, hi)
    c = fill_histogram(arr[j:], "h", n_bins, lo, hi)
    left = merge_histograms(merge_histograms(a, b), c)
    right = merge_histograms(a, merge_histograms(b, c))
    swapped = merge_histograms(b, a)
    assert np.array_equal(left.counts, right.counts)
    assert np.array_equal(merge_histograms(a, b).counts, swapped.counts)
    whole = fill_histogram(arr, "h", n_bins, lo, hi)
    assert np.array_equal(left.counts, whole.counts)
    assert (left.underflow, left.overflow, left.n_filled) == (whole.underflow, whole.overflow, whole.n_filled)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")
@settings(max_examples=100, deadline=None)
@given(values=values_strategy, spec=spec_strategy)
def test_numba_and_numpy_kernels_identical(values, spec):
    n_bins, lo, width = spec
    arr = np.asarray(values, dtype=np.float64)
    c_np, u_np, o_np = fill_counts(arr, n_bins, lo, lo + width, kernel="numpy")
    c_nb, u_nb, o_nb = fill_counts(arr, n_bins, lo, lo + width, kernel="numba")
    assert np.array_equal(c_np, c_nb) and (u_np, o_np) == (u_nb, o_nb)


def test_kernel_env_selection(monkeypatch):
    from casa_mini.engine import hist

    monkeypatch.setenv("CASA_MINI_KERNEL", "numpy")
    assert hist.active_kernel() == "numpy"
    if HAS_NUMBA:
        monkeypatch.setenv("CASA_MINI_KERNEL", "numba")
        assert hist.active_kernel() == "numba"
    monkeypatch.delenv("CASA_MINI_KERNEL")
    assert hist.active_kernel() in ("numba", "numpy")
