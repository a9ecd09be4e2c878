import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpgat import kernels
from mpgat.stats import EXACT_MAX, exact_p_value, normal_p_value, wilcoxon_rank_sum
from oracles import brute_force_p


def test_textbook_case():
    res = wilcoxon_rank_sum([1, 2, 3], [4, 5, 6])
    assert res.p_value == 0.1
    assert res.h == 0
    assert res.method == "exact"
    assert res.statistic == 6


def test_identical_samples():
    a = [0.2, 0.3, 0.25, 0.21]
    res = wilcoxon_rank_sum(a, list(a))
    assert res.h == 0
    assert res.p_value == 1.0


def test_separated_thirty_draws():
    rng = np.random.default_rng(0)
    a = 0.15 + rng.normal(0, 0.002, 30)
    b = 0.22 + rng.normal(0, 0.002, 30)
    res = wilcoxon_rank_sum(a, b)
    assert res.method == "normal"
    assert res.h == 1
    assert wilcoxon_rank_sum(b, a).h == -1
    # exact route on subsamples agrees on the decision
    assert wilcoxon_rank_sum(a[:8], b[:8]).h == 1


def test_needs_two_observations():
    with pytest.raises(ValueError):
        wilcoxon_rank_sum([1.0], [2.0, 3.0])


def test_unknown_method():
    with pytest.raises(ValueError):
        wilcoxon_rank_sum([1, 2], [3, 4], method="bootstrap")


def test_auto_threshold():
    small = wilcoxon_rank_sum(np.arange(EXACT_MAX), np.arange(EXACT_MAX) + 0.5)
    large = wilcoxon_rank_sum(np.arange(EXACT_MAX + 1), np.arange(EXACT_MAX + 1) + 0.5)
    assert small.method == "exact" and large.method == "normal"


@pytest.mark.parametrize("n,m", [(2, 2), (3, 5), (4, 4), (5, 2)])
def test_exact_matches_brute_force_with_ties(n, m):
    rng = np.random.default_rng(n * 10 + m)
    for _ in range(20):
        a = rng.integers(0, 4, n).astype(float)
        b = rng.integers(0, 4, m).astype(float)
        p, _ = exact_p_value(a, b)
        assert abs(p - brute_force_p(a, b)) < 1e-12


def test_subset_sum_backends_agree():
    rng = np.random.default_rng(1)
    for _ in range(20):
        values = rng.integers(1, 30, int(rng.integers(2, 14)))
        n = int(rng.integers(1, len(values) + 1))
        np.testing.assert_array_equal(kernels.subset_sum_counts_loop(values, n),
                                      kernels.subset_sum_counts_numpy(values, n))


def test_subset_sum_counts_total():
    counts = kernels.subset_sum_counts(np.arange(2, 21, 2), 4)
    assert counts.sum() == math.comb(10, 4)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=10),
       st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=10))
def test_h_antisymmetry(a, b):
    assert wilcoxon_rank_sum(a, b).h == -wilcoxon_rank_sum(b, a).h
    assert wilcoxon_rank_sum(a, b).p_value == pytest.approx(wilcoxon_rank_sum(b, a).p_value, abs=1e-12)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=9),
       st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=9))
def test_p_value_in_unit_interval(a, b):
    for method in ("exact", "normal"):
        p = wilcoxon_rank_sum(a, b, method=method).p_value
        assert 0 < p <= 1


def test_normal_agrees_with_exact_on_decisions():
    rng = np.random.default_rng(2)
    agree = total = 0
    for _ in range(300):
        shift = rng.uniform(0, 1.5)
        a = rng.normal(0, 1, 12)
        b = rng.normal(shift, 1, 12)
        pe, _ = exact_p_value(a, b)
        pn, _ = normal_p_value(a, b)
        agree += (pe < 0.05) == (pn < 0.05)
        total += 1
    assert agree / total >= 0.95
