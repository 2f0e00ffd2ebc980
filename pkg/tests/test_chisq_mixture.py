import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fpvc.chisq_mixture import (
    CF_INVERSION,
    MOMENT_MATCHING,
    clean_weights,
    liu_survival,
    mixture_survival,
)


def monte_carlo(w, qs, draws, seed, chunk=10**6):
    rng = np.random.default_rng(seed)
    w = np.asarray(w, dtype=float)
    hits = np.zeros(len(qs))
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        x = rng.standard_normal((m, w.size))
        s = (x * x) @ w
        hits += [(s > q).sum() for q in qs]
        done += m
    return hits / draws


weights_st = st.lists(st.floats(0.01, 5.0), min_size=2, max_size=8)


class TestKnownQuantiles:
    def test_chi2_1(self):
        r = mixture_survival([1.0], 3.841)
        assert r.p == pytest.approx(0.05, abs=5e-4)
        assert r.method == CF_INVERSION

    def test_chi2_2(self):
        assert mixture_survival([1.0, 1.0], 5.991).p == pytest.approx(0.05, abs=5e-4)

    @pytest.mark.parametrize("dof", [2, 3, 5, 8])
    def test_equal_weights_are_chi2(self, dof):
        for q in (0.5, dof, 3 * dof, 6 * dof):
            r = mixture_survival(np.ones(dof), q)
            assert r.p == pytest.approx(stats.chi2.sf(q, dof), abs=1e-9)

    def test_two_weights_closed_form(self):
        # a chi2_2 pair of weight a plus one of weight b has survival
        # (a e^{-q/2a} - b e^{-q/2b}) / (a - b)
        a, b = 2.0, 0.5
        for q in (0.3, 2.0, 9.0, 25.0):
            expected = (a * math.exp(-q / (2 * a)) - b * math.exp(-q / (2 * b))) / (a - b)
            assert mixture_survival([a, a, b, b], q).p == pytest.approx(expected, abs=1e-9)

    def test_monte_carlo_oracle(self):
        w = [2.0, 0.5, 0.1]
        qs = [1.0, 6.0, 12.0]
        mc = monte_carlo(w, qs, 10**7, seed=17)
        for q, pm in zip(qs, mc):
            se = math.sqrt(pm * (1 - pm) / 10**7)
            assert abs(mixture_survival(w, q).p - pm) <= 3 * se


class TestEdges:
    def test_zero_statistic(self):
        assert mixture_survival([1.0, 2.0], 0.0).p == 1.0

    def test_all_zero_weights(self):
        with pytest.raises(ValueError):
            mixture_survival([0.0, 0.0], 1.0)

    def test_negative_weights_clamped(self):
        np.testing.assert_array_equal(clean_weights([-1e-9, 2.0, 1.0]), [2.0, 1.0])

    def test_tiny_weights_dropped(self):
        np.testing.assert_array_equal(clean_weights([1.0, 1e-13, 0.5]), [1.0, 0.5])

    def test_non_finite_statistic(self):
        with pytest.raises(ValueError):
            mixture_survival([1.0, 2.0], float("nan"))

    def test_forced_moment_matching(self):
        r = mixture_survival([1.0, 0.5, 0.2], 4.0, method=MOMENT_MATCHING)
        assert r.method == MOMENT_MATCHING
        assert r.p == pytest.approx(liu_survival([1.0, 0.5, 0.2], 4.0))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            mixture_survival([1.0, 0.5], 1.0, method="davies")

    def test_liu_exact_for_equal_weights(self):
        assert liu_survival(np.ones(4), 7.0) == pytest.approx(stats.chi2.sf(7.0, 4), rel=1e-10)

    def test_deep_tail_accuracy(self):
        q = stats.chi2.isf(1e-8, 3)
        r = mixture_survival(np.ones(3), q)
        assert r.p == pytest.approx(1e-8, rel=1e-2)


class TestProperties:
    @given(weights_st, st.floats(0.01, 60.0), st.floats(0.01, 60.0))
    def test_decreasing_in_q(self, w, q1, q2):
        lo, hi = sorted((q1, q2))
        if hi - lo < 1e-3:
            return
        a, b = mixture_survival(w, lo).p, mixture_survival(w, hi).p
        assert a >= b
        if a > 1e-6:  # strict only above the 1e-9 absolute accuracy floor
            assert a > b

    @given(weights_st, st.floats(0.1, 40.0), st.floats(0.05, 20.0))
    def test_scale_invariance(self, w, q, c):
        a = mixture_survival(w, q).p
        b = mixture_survival(np.asarray(w) * c, q * c).p
        assert abs(a - b) <= 1e-8

    @given(weights_st, st.floats(0.0, 100.0))
    def test_in_unit_interval(self, w, q):
        p = mixture_survival(w, q).p
        assert 0.0 <= p <= 1.0

    @given(weights_st, st.floats(0.5, 30.0))
    def test_between_extreme_chi2_bounds(self, w, q):
        # sum a chi2_1 is stochastically between min(a) chi2_L and max(a) chi2_L
        w = np.asarray(w)
        p = mixture_survival(w, q).p
        L = w.size
        assert stats.chi2.sf(q / w.min(), L) - 1e-9 <= p <= stats.chi2.sf(q / w.max(), L) + 1e-9
