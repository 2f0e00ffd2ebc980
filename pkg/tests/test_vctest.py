import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import rank_two
from fpvc.data import CovariateMatrix, GenotypeMatrix
from fpvc.fpca import fit_fpca
from fpvc.nuisance import center_genotypes, fit_nuisance_columns
from fpvc.vctest import (
    NullComponents,
    VcConfig,
    bh_reject,
    fisher_combine,
    fpvc_test,
    fpvc_test_scores,
    null_components,
    null_weights,
    q_statistic,
)


def intercept(n):
    return np.ones((n, 1))


def centered(Z, X=None, kind="binomial"):
    X = intercept(Z.shape[0]) if X is None else X
    return center_genotypes(fit_nuisance_columns(Z, X, kind), Z, X)


class TestQStatistic:
    def test_brute_force(self, rng):
        n, K, s = 25, 3, 4
        xi = rng.normal(size=(n, K))
        zs = rng.normal(size=(n, s))
        total = 0.0
        for k in range(K):
            for j in range(s):
                inner = 0.0
                for i in range(n):
                    inner += xi[i, k] * zs[i, j]
                total += inner**2
        assert q_statistic(xi, zs) == pytest.approx(total / n, rel=1e-10)

    def test_multiple_outcomes_weighted(self, rng):
        xa, xb = rng.normal(size=(20, 2)), rng.normal(size=(20, 1))
        zs = rng.normal(size=(20, 3))
        expected = 2.0 * q_statistic(xa, zs) + 0.5 * q_statistic(xb, zs)
        assert q_statistic([xa, xb], zs, [2.0, 0.5]) == pytest.approx(expected, rel=1e-12)

    def test_zero_scores(self, rng):
        assert q_statistic(np.zeros((10, 2)), rng.normal(size=(10, 3))) == 0.0

    def test_scalar_case(self):
        xi = np.array([[1.0], [-1.0], [2.0]])
        z = np.array([0.5, -0.5, 0.0])
        # (0.5 + 0.5 + 0)^2 / 3
        assert q_statistic(xi, z) == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_subject_mismatch(self, rng):
        with pytest.raises(ValueError):
            q_statistic(rng.normal(size=(10, 2)), rng.normal(size=(9, 2)))

    def test_negative_outcome_weight(self, rng):
        with pytest.raises(ValueError):
            q_statistic(rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), [-1.0])

    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_quadratic_in_scores(self, seed, c):
        rng = np.random.default_rng(seed)
        xi, zs = rng.normal(size=(15, 2)), rng.normal(size=(15, 3))
        assert q_statistic(c * xi, zs) == pytest.approx(c * c * q_statistic(xi, zs), rel=1e-10)


class TestNullComponents:
    def test_intercept_only_hand_case(self):
        # with an intercept-only nuisance model the coupling correction
        # subtracts the score mean: column = (xi_ik - mean_k xi) z*_ij
        xi = np.array([[1.0, 0.0], [2.0, 1.0], [-1.0, 0.5], [0.0, -2.0], [3.0, 1.0]])
        Z = np.array([[0, 1], [1, 2], [2, 0], [1, 1], [0, 2]], dtype=float)
        cg = centered(Z)
        nc = null_components(xi, cg)
        zstar = Z - Z.mean(axis=0)
        expected = np.column_stack(
            [(xi[:, k] - xi[:, k].mean()) * zstar[:, j] for k in range(2) for j in range(2)]
        )
        expected -= expected.mean(axis=0)
        np.testing.assert_allclose(nc.values, expected, atol=1e-12)
        assert nc.columns == ((0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1))

    def test_zero_coupling(self, rng):
        xi = rng.normal(size=(30, 2))
        Z = rng.binomial(2, 0.3, (30, 3)).astype(float)
        cg = centered(Z)
        nc = null_components(xi, cg, couplings=[np.zeros((2, 3, 1))])
        raw = (xi[:, :, None] * cg.zstar[:, None, :]).reshape(30, -1)
        np.testing.assert_allclose(nc.values, raw - raw.mean(axis=0), atol=1e-12)

    def test_columns_centered(self, rng):
        X = np.column_stack([np.ones(60), rng.normal(size=60)])
        Z = rng.binomial(1, 0.4, (60, 3)).astype(float)
        nc = null_components([rng.normal(size=(60, 2)), rng.normal(size=(60, 1))], centered(Z, X, "logistic"))
        assert nc.L == 9
        np.testing.assert_allclose(nc.values.mean(axis=0), 0.0, atol=1e-12)
        assert nc.columns[-1] == (1, 0, 2)


class TestNullWeights:
    def test_single_column_is_variance(self, rng):
        v = rng.normal(size=(40, 1))
        assert null_weights(v)[0] == pytest.approx(np.var(v, ddof=1), rel=1e-12)

    def test_identical_columns(self, rng):
        v = np.repeat(rng.normal(size=(40, 1)), 3, axis=1)
        w = null_weights(v)
        assert w[0] == pytest.approx(3 * np.var(v[:, 0], ddof=1), rel=1e-10)
        assert np.all(w[1:] < 1e-12)

    @given(st.integers(0, 10_000))
    def test_trace_and_order(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(30, 6)) @ rng.normal(size=(6, 6))
        w = null_weights(NullComponents(v))
        assert np.sum(w) == pytest.approx(np.trace(np.cov(v, rowvar=False)), rel=1e-10)
        assert np.all(w >= 0) and np.all(np.diff(w) <= 0)

    def test_gram_path(self, rng):
        v = rng.normal(size=(8, 20))
        w = null_weights(v)
        direct = np.sort(np.clip(np.linalg.eigvalsh(np.cov(v, rowvar=False)), 0, None))[::-1]
        np.testing.assert_allclose(w, direct[: w.size], atol=1e-10)
        assert np.all(direct[w.size :] < 1e-10)

    def test_needs_two_subjects(self):
        with pytest.raises(ValueError):
            null_weights(np.ones((1, 3)))


class TestFisher:
    def test_single_passthrough(self):
        assert fisher_combine([0.037]) == 0.037

    def test_two_closed_form(self):
        # chi2_4 survival is e^{-x/2}(1 + x/2)
        x = -2 * 2 * math.log(0.05)
        assert fisher_combine([0.05, 0.05]) == pytest.approx(math.exp(-x / 2) * (1 + x / 2), abs=1e-6)
        assert fisher_combine([0.05, 0.05]) == pytest.approx(0.0175, abs=1e-4)

    def test_ones(self):
        assert fisher_combine([1.0, 1.0, 1.0]) == pytest.approx(1.0)

    def test_zero_clamped_with_warning(self):
        with pytest.warns(RuntimeWarning):
            p = fisher_combine([0.0, 0.5])
        assert 0.0 <= p < 1e-300

    @pytest.mark.parametrize("bad", [[], [1.5], [-0.1], [float("nan")]])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            fisher_combine(bad)

    def test_uniform_under_null(self):
        rng = np.random.default_rng(5)
        p = [fisher_combine(rng.uniform(size=3)) for _ in range(4000)]
        assert stats.kstest(p, "uniform").pvalue > 0.01


def bh_oracle(p, q):
    """Largest rejection set whose size r satisfies every member p <= r q / m."""
    m = len(p)
    for r in range(m, 0, -1):
        if sum(pi <= r * q / m for pi in p) >= r:
            cut = r * q / m
            return [pi <= cut for pi in p]
    return [False] * m


class TestBh:
    def test_hand_example(self):
        p = [0.01, 0.04, 0.03, 0.20]
        res = bh_reject(p, 0.1)
        # sorted 0.01 0.03 0.04 0.20 vs 0.025 0.05 0.075 0.1
        assert res.rejected.tolist() == [True, True, True, False]
        assert res.n_rejected == 3
        assert res.threshold == pytest.approx(0.075)

    def test_step_up_not_step_down(self):
        # the first sorted p fails its bound but the second passes
        res = bh_reject([0.04, 0.045], 0.1)
        assert res.rejected.tolist() == [True, True]

    def test_nothing_rejected(self):
        res = bh_reject([0.5, 0.9, 0.3], 0.1)
        assert res.n_rejected == 0 and not res.rejected.any()
        assert res.threshold == pytest.approx(0.1 / 3)

    def test_empty(self):
        res = bh_reject([], 0.1)
        assert res.n_rejected == 0 and res.rejected.size == 0

    def test_ties(self):
        assert bh_reject([0.05] * 4, 0.1).n_rejected == 4

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.1])
    def test_level_checked(self, q):
        with pytest.raises(ValueError):
            bh_reject([0.1], q)

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), st.floats(0.01, 0.5))
    def test_matches_oracle(self, p, q):
        res = bh_reject(p, q)
        assert res.rejected.tolist() == bh_oracle(p, q)
        if res.n_rejected:
            assert np.max(np.asarray(p)[res.rejected]) <= res.threshold + 1e-15
            assert res.threshold == pytest.approx(res.n_rejected * q / len(p)) or np.sum(
                np.asarray(p) <= res.threshold
            ) == res.n_rejected

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=20), st.floats(0.01, 0.5))
    def test_monotone_in_level(self, p, q):
        small, large = bh_reject(p, q), bh_reject(p, min(0.99, 2 * q))
        assert np.all(large.rejected[small.rejected])


class TestFpvcTestScores:
    def test_degenerate_window(self, rng):
        with pytest.warns(RuntimeWarning):
            res = fpvc_test_scores(rng.normal(size=(30, 2)), np.zeros((30, 3)), intercept(30))
        assert res.p_value == 1.0 and res.degenerate

    def test_result_fields(self, rng):
        xi = rng.normal(size=(80, 2))
        Z = rng.binomial(2, 0.3, (80, 4)).astype(float)
        res = fpvc_test_scores(xi, Z, intercept(80))
        assert res.n == 80 and res.s == 4 and res.k == (2,)
        assert 0 < res.p_value <= 1
        assert res.weights.size <= 8 and np.all(np.diff(res.weights) <= 0)
        cg = centered(Z)
        assert res.Q == pytest.approx(q_statistic(xi, cg.zstar), rel=1e-12)

    def test_strong_signal(self, rng):
        Z = rng.binomial(2, 0.3, (150, 2)).astype(float)
        xi = np.column_stack([Z[:, 0] + rng.normal(0, 0.5, 150), rng.normal(size=150)])
        assert fpvc_test_scores(xi, Z, intercept(150)).p_value < 1e-6

    def test_covariates_absorb_confounding(self, rng):
        # genotype and scores both depend on x but not on each other
        n = 400
        x = rng.normal(size=n)
        X = np.column_stack([np.ones(n), x])
        Z = rng.binomial(2, 1 / (1 + np.exp(-x)))[:, None].astype(float)
        xi = (2 * x + rng.normal(size=n))[:, None]
        naive = fpvc_test_scores(xi, Z, intercept(n)).p_value
        adjusted = fpvc_test_scores(xi, Z, X).p_value
        assert naive < 1e-6 and adjusted > 1e-3

    def test_uniform_under_null(self):
        rng = np.random.default_rng(11)
        p = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for _ in range(2000):
                xi = rng.normal(size=(150, 2)) * [1.0, 0.5]
                Z = rng.binomial(2, 0.3, (150, 3)).astype(float)
                p.append(fpvc_test_scores(xi, Z, intercept(150)).p_value)
        assert stats.kstest(p, "uniform").pvalue > 0.01
        assert np.mean(np.asarray(p) < 0.05) == pytest.approx(0.05, abs=0.02)


class TestEndToEnd:
    def test_fpvc_test(self, rng):
        ds, xi = rank_two(rng, n=200)
        model = fit_fpca(ds)
        p = 6
        G = rng.binomial(2, 0.3, (len(ds.ids), p)).astype(float)
        geno = GenotypeMatrix(ds.ids, tuple(f"m{j}" for j in range(p)), G)
        res = fpvc_test([model], [ds], geno, markers=["m0", "m1", "m2"])
        assert res.s == 3 and res.n == len(ds.ids)
        assert 0 < res.p_value <= 1

    def test_subjects_intersected(self, rng):
        ds, _ = rank_two(rng, n=120)
        model = fit_fpca(ds)
        ids = ds.ids[10:]
        G = rng.binomial(1, 0.4, (len(ids), 2)).astype(float)
        geno = GenotypeMatrix(ids, ("a", "b"), G, coding="dominant")
        with pytest.warns(RuntimeWarning, match="dropped"):
            res = fpvc_test([model], [ds], geno)
        assert res.n == len(ids)

    def test_signal_detected(self, rng):
        ds, xi = rank_two(rng, n=300)
        G = np.column_stack([(xi[:, 0] > 0).astype(float), rng.binomial(1, 0.5, len(ds.ids))])
        geno = GenotypeMatrix(ds.ids, ("c", "d"), G, coding="dominant")
        covar = CovariateMatrix.intercept_only(ds.ids)
        res = fpvc_test([fit_fpca(ds)], [ds], geno, covar=covar, config=VcConfig(score_kind="blup"))
        assert res.p_value < 1e-6

    def test_model_count_checked(self, rng):
        ds, _ = rank_two(rng, n=50)
        geno = GenotypeMatrix(ds.ids, ("a",), np.ones((len(ds.ids), 1)))
        with pytest.raises(ValueError):
            fpvc_test([], [ds], geno)
