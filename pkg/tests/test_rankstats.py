"""Rank statistics against independent brute-force oracles."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iconika.rankstats import (
    EXACT_PERMUTATION,
    average_precision,
    fractional_ranks,
    spearman,
    spearman_pvalue,
)


def oracle_ranks(values):
    """Counting definition: rank = (#smaller) + (#equal + 1) / 2."""
    values = list(values)
    return np.array(
        [
            sum(1 for u in values if u < v) + (sum(1 for u in values if u == v) + 1) / 2
            for v in values
        ]
    )


def oracle_spearman(a, b):
    """Pearson correlation of counting-oracle ranks; None when degenerate."""
    ra, rb = oracle_ranks(a), oracle_ranks(b)
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        return None
    return float(np.corrcoef(ra, rb)[0, 1])


def oracle_perm_pvalue(a, b):
    """Exhaustive enumeration with exact integer arithmetic.

    Uses doubled ranks so every quantity is an integer; the correlation
    denominator is permutation-invariant, making |rho| comparisons exact.
    """
    ra = [int(round(2 * v)) for v in oracle_ranks(a)]
    rb = [int(round(2 * v)) for v in oracle_ranks(b)]
    n = len(ra)
    offset = sum(ra) * sum(rb)
    observed = abs(n * sum(x * y for x, y in zip(ra, rb)) - offset)
    count = 0
    total = 0
    for perm in itertools.permutations(rb):
        total += 1
        if abs(n * sum(x * y for x, y in zip(ra, perm)) - offset) >= observed:
            count += 1
    return count / total


def oracle_t_sf(t, dof):
    """Student-t survival function by quadrature of the explicit density."""
    from scipy.integrate import quad

    coeff = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))

    def density(x):
        return coeff * (1 + x * x / dof) ** (-(dof + 1) / 2)

    value, _ = quad(density, t, np.inf)
    return value


def oracle_average_precision(scores, ratings, alpha=1.5):
    """Explicit precision walk down the (stably) sorted list."""
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    hits = 0
    total = 0.0
    npos = sum(1 for r in ratings if r > alpha)
    for rank, k in enumerate(order, start=1):
        if ratings[k] > alpha:
            hits += 1
            total += hits / rank
    return total / npos


class TestFractionalRanks:
    def test_strictly_increasing(self):
        assert fractional_ranks([10, 20, 30]).tolist() == [1, 2, 3]

    def test_symmetric_tie(self):
        assert fractional_ranks([5, 5, 7]).tolist() == [1.5, 1.5, 3]

    def test_tie_group_of_three(self):
        # tie group {3} occupies positions 2, 3, 4 -> mean 3.0
        assert fractional_ranks([3, 1, 3, 3]).tolist() == [3.0, 1.0, 3.0, 3.0]

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            fractional_ranks([1.0, np.nan])

    @given(st.lists(st.integers(min_value=-3, max_value=3), min_size=1, max_size=40))
    def test_matches_counting_oracle_and_sums(self, values):
        ranks = fractional_ranks(values)
        n = len(values)
        assert math.isclose(ranks.sum(), n * (n + 1) / 2)
        assert np.allclose(ranks, oracle_ranks(values))


class TestSpearman:
    def test_identical(self):
        assert spearman([1, 2, 3, 4], [1, 2, 3, 4]).rho == pytest.approx(1.0)

    def test_reversed(self):
        assert spearman([1, 2, 3, 4], [4, 3, 2, 1]).rho == pytest.approx(-1.0)

    def test_tied_example(self):
        # ranks a = [1.5, 1.5, 3] vs b = [1, 2, 3]: rho = 1.5 / sqrt(3)
        result = spearman([1, 1, 2], [1, 2, 3])
        assert result.rho == pytest.approx(1.5 / math.sqrt(3), abs=1e-12)

    def test_constant_vector_is_degenerate(self):
        result = spearman([5, 5, 5], [1, 2, 3])
        assert result.rho == 0.0
        assert result.degenerate

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ValueError):
            spearman([1], [2])

    def test_symmetry_and_self_correlation(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.integers(0, 4, size=8)
            b = rng.integers(0, 4, size=8)
            if np.all(a == a[0]) or np.all(b == b[0]):
                continue
            assert spearman(a, b).rho == pytest.approx(spearman(b, a).rho, abs=1e-14)
            assert spearman(a, a).rho == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=30)
        b = rng.normal(size=30)
        base = spearman(a, b).rho
        assert spearman(np.exp(a), b).rho == pytest.approx(base, abs=1e-12)
        assert spearman(a, 3 * b + 7).rho == pytest.approx(base, abs=1e-12)

    def test_brute_force_small_n(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            n = int(rng.integers(2, 7))
            a = rng.integers(0, 3, size=n)
            b = rng.integers(0, 3, size=n)
            expected = oracle_spearman(a, b)
            got = spearman(a, b)
            if expected is None:
                assert got.degenerate and got.rho == 0.0
            else:
                assert got.rho == pytest.approx(expected, abs=1e-12)


class TestSpearmanPvalue:
    def test_zero_rho(self):
        p, degenerate = spearman_pvalue(0.0, 10)
        assert p == pytest.approx(1.0)
        assert not degenerate

    def test_perfect_rho_exact(self):
        p, _ = spearman_pvalue(1.0, 5, EXACT_PERMUTATION)
        assert p == pytest.approx(2 / 120)

    def test_t_approximation_against_quadrature(self):
        rho, n = 0.9, 20
        t = rho * math.sqrt((n - 2) / (1 - rho**2))
        assert t == pytest.approx(8.76, abs=0.01)
        expected = 2 * oracle_t_sf(t, n - 2)
        p, _ = spearman_pvalue(rho, n)
        assert p == pytest.approx(expected, rel=1e-8)
        assert p < 0.05

    def test_small_n_degenerate(self):
        p, degenerate = spearman_pvalue(0.5, 3)
        assert p == 1.0 and degenerate

    def test_rho_one_under_t(self):
        p, _ = spearman_pvalue(1.0, 6)
        assert p == 0.0

    def test_exact_enumeration_with_ties(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            n = int(rng.integers(2, 7))
            a = rng.integers(0, 3, size=n)
            b = rng.integers(0, 3, size=n)
            result = spearman(a, b, method=EXACT_PERMUTATION)
            if result.degenerate:
                continue
            assert result.p_value == oracle_perm_pvalue(a, b)

    def test_needs_ranks_for_partial_rho(self):
        with pytest.raises(ValueError):
            spearman_pvalue(0.5, 5, EXACT_PERMUTATION)

    def test_rejects_big_n_for_exact(self):
        with pytest.raises(ValueError):
            spearman(np.arange(9), np.arange(9), method=EXACT_PERMUTATION)


class TestAveragePrecision:
    def test_all_positive(self):
        assert average_precision([3, 2, 1], [2, 2, 2]) == pytest.approx(1.0)

    def test_hand_case(self):
        # hits at ranks 1 and 3: (1/1 + 2/3) / 2
        assert average_precision([0.9, 0.8, 0.7], [2, 1, 2]) == pytest.approx(5 / 6)

    def test_single_positive_last(self):
        assert average_precision([1, 2, 3], [2, 0, 0]) == pytest.approx(1 / 3)

    def test_no_positive_is_error(self):
        with pytest.raises(ValueError):
            average_precision([1, 2], [0, 1])

    def test_tie_break_uses_input_order(self):
        # equal scores: first-listed item is ranked first
        assert average_precision([1.0, 1.0], [2, 0]) == pytest.approx(1.0)
        assert average_precision([1.0, 1.0], [0, 2]) == pytest.approx(0.5)

    @settings(max_examples=200)
    @given(st.data())
    def test_matches_precision_walk_oracle(self, data):
        n = data.draw(st.integers(min_value=1, max_value=30))
        scores = data.draw(
            st.lists(st.integers(min_value=-5, max_value=5), min_size=n, max_size=n)
        )
        ratings = data.draw(
            st.lists(st.sampled_from([0, 1, 2]), min_size=n, max_size=n)
        )
        if not any(r > 1.5 for r in ratings):
            ratings[0] = 2
        scores = [float(s) for s in scores]
        assert average_precision(scores, ratings) == pytest.approx(
            oracle_average_precision(scores, ratings), abs=1e-12
        )

    def test_perfect_iff_positives_outrank_negatives(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 12))
            scores = rng.integers(0, 4, size=n).astype(float)
            ratings = rng.integers(0, 3, size=n)
            if not np.any(ratings > 1.5):
                ratings[0] = 2
            ap = average_precision(scores, ratings)
            order = sorted(range(n), key=lambda k: (-scores[k], k))
            flags = [ratings[k] > 1.5 for k in order]
            perfect = flags == sorted(flags, reverse=True)
            assert (ap == pytest.approx(1.0)) == perfect
