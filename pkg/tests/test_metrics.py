import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mechpilot.evidence.metrics import (
    EmptyClass,
    NonFiniteScore,
    ZeroVariance,
    auroc,
    bootstrap_means,
    effect_size,
    jeffreys_sd,
)


def pairwise_auroc(pos, neg):
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


scores = st.lists(st.integers(-5, 5).map(float) | st.floats(-10, 10, allow_nan=False), min_size=1, max_size=50)


class TestAuroc:
    def test_perfect_and_reversed(self):
        assert auroc([3, 4], [1, 2]) == 1.0
        assert auroc([1, 2], [3, 4]) == 0.0

    def test_all_tied_is_half(self):
        assert auroc([1, 1, 1], [1, 1]) == 0.5

    def test_hand_computed(self):
        # pairs: (2>1), (2<3), (4>1), (4>3) -> 3/4
        assert auroc([2, 4], [1, 3]) == 0.75

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            auroc([], [1.0])

    def test_non_finite(self):
        with pytest.raises(NonFiniteScore):
            auroc([float("inf")], [1.0])

    @settings(max_examples=200)
    @given(scores, scores)
    def test_matches_pairwise_oracle(self, pos, neg):
        assert abs(auroc(pos, neg) - pairwise_auroc(pos, neg)) <= 1e-9

    @given(scores, scores)
    def test_complement_symmetry(self, pos, neg):
        assert auroc(pos, neg) + auroc(neg, pos) == 1.0

    @given(scores, scores, st.floats(0.1, 10), st.floats(-5, 5))
    def test_invariant_under_increasing_affine_map(self, pos, neg, a, b):
        f = lambda xs: [a * x + b for x in xs]
        # exact ties must survive the map for exact invariance
        assume(len(set(f(pos + neg))) == len(set(pos + neg)))
        assume(sorted(f(pos + neg)) == f(sorted(pos + neg)))
        assert auroc(f(pos), f(neg)) == auroc(pos, neg)

    @given(scores, scores)
    def test_invariant_under_rank_transform(self, pos, neg):
        from scipy.stats import rankdata
        ranks = rankdata(pos + neg)
        assert auroc(ranks[: len(pos)], ranks[len(pos):]) == auroc(pos, neg)


class TestBootstrap:
    def test_shape_and_determinism(self):
        a = bootstrap_means([0, 1, 1, 0], 50, 3)
        assert a.shape == (50,) and np.array_equal(a, bootstrap_means([0, 1, 1, 0], 50, 3))

    def test_constant_outcomes_have_zero_spread(self):
        assert bootstrap_means([1] * 30, 100, 0).std() == 0.0

    def test_sd_near_binomial(self):
        x = np.r_[np.ones(100), np.zeros(100)]
        sd = bootstrap_means(x, 4000, 0).std(ddof=1)
        assert abs(sd - math.sqrt(0.25 / 200)) < 0.003

    def test_empty(self):
        with pytest.raises(ValueError):
            bootstrap_means([], 10, 0)


class TestEffectSize:
    def test_value(self):
        rates = [0.4, 0.6]
        assert effect_size(rates, 0.0) == pytest.approx(0.5 / np.std(rates, ddof=1))

    def test_zero_variance_with_shift_raises(self):
        with pytest.raises(ZeroVariance) as info:
            effect_size([1.0, 1.0, 1.0], 0.2)
        assert info.value.delta == pytest.approx(0.8)

    def test_zero_variance_no_shift_is_zero(self):
        assert effect_size([1.0, 1.0], 1.0) == 0.0

    def test_needs_two_replicates(self):
        with pytest.raises(ValueError):
            effect_size([0.5], 0.1)

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.floats(0, 1))
    def test_non_negative(self, rates, ablated):
        try:
            assert effect_size(rates, ablated) >= 0.0
        except ZeroVariance:
            pass

    def test_jeffreys_sd_never_zero(self):
        assert jeffreys_sd(200, 200) > 0 and jeffreys_sd(0, 200) > 0
        p = 200.5 / 201
        assert jeffreys_sd(200, 200) == pytest.approx(math.sqrt(p * (1 - p) / 200))
