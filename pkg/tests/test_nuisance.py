import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from fpvc.nuisance import (
    NuisanceError,
    center_genotypes,
    coupling_matrices,
    fit_nuisance,
    fit_nuisance_columns,
    influence,
    mean_gradient,
)


def design(rng, n, q=1, discrete=False):
    cols = [np.ones(n)]
    for _ in range(q):
        cols.append(rng.integers(0, 3, n).astype(float) if discrete else rng.normal(size=n))
    return np.column_stack(cols)


def logistic_data(rng, n=300, q=2, trials=1):
    X = design(rng, n, q)
    theta = rng.normal(0, 0.5, q + 1)
    theta[0] = -0.5
    return rng.binomial(trials, expit(X @ theta)).astype(float), X


def newton_oracle(z, X, trials):
    """Independent maximiser of the binomial log-likelihood."""

    def nll(th):
        eta = X @ th
        return -np.sum(z * eta - trials * np.logaddexp(0.0, eta))

    def grad(th):
        return -X.T @ (z - trials * expit(X @ th))

    res = minimize(nll, np.zeros(X.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-12, "maxiter": 10_000})
    th = res.x
    for _ in range(5):  # polish with Newton steps
        p = expit(X @ th)
        th = th + np.linalg.solve((X * (trials * p * (1 - p))[:, None]).T @ X, X.T @ (z - trials * p))
    return th


class TestFit:
    def test_intercept_only_logistic(self, rng):
        z = rng.integers(0, 2, 50).astype(float)
        m = fit_nuisance(z, np.ones(50), "logistic")
        np.testing.assert_allclose(m.fitted, z.mean(), rtol=1e-10)

    def test_balanced_symmetric_groups(self):
        x = np.repeat([0.0, 1.0], 40)
        z = np.tile(np.r_[np.ones(10), np.zeros(30)], 2)
        m = fit_nuisance(z, np.column_stack([np.ones(80), x]), "logistic")
        assert abs(m.theta[1]) < 1e-8

    @pytest.mark.parametrize("kind,trials", [("logistic", 1), ("binomial", 2)])
    def test_matches_independent_newton(self, rng, kind, trials):
        z, X = logistic_data(rng, trials=trials)
        m = fit_nuisance(z, X, kind)
        np.testing.assert_allclose(m.theta, newton_oracle(z, X, trials), atol=1e-6)
        assert m.converged

    def test_fisher_information(self, rng):
        z, X = logistic_data(rng)
        m = fit_nuisance(z, X, "logistic")
        p = m.fitted
        np.testing.assert_allclose(m.fisher_info, (X * (p * (1 - p))[:, None]).T @ X / X.shape[0], rtol=1e-12)
        assert np.all(np.linalg.eigvalsh(m.fisher_info) > 0)

    def test_fitted_in_open_range(self, rng):
        z, X = logistic_data(rng, trials=2)
        m = fit_nuisance(z, X, "binomial")
        assert np.all((m.fitted > 0) & (m.fitted < 2))

    def test_separation_detected(self):
        x = np.linspace(-1, 1, 40)
        z = (x > 0).astype(float)
        with pytest.raises(NuisanceError, match="empirical"):
            fit_nuisance(z, np.column_stack([np.ones(40), x]), "logistic")

    def test_singular_design(self, rng):
        X = np.column_stack([np.ones(30), np.ones(30)])
        with pytest.raises(NuisanceError):
            fit_nuisance(rng.integers(0, 2, 30).astype(float), X, "logistic")

    def test_range_checked(self):
        with pytest.raises(NuisanceError):
            fit_nuisance(np.array([0.0, 2.0, 1.0]), np.ones(3), "logistic")

    def test_missing_rejected(self):
        with pytest.raises(NuisanceError):
            fit_nuisance(np.array([0.0, np.nan, 1.0]), np.ones(3), "logistic")

    def test_batched_equals_single(self, rng):
        X = design(rng, 200, 2)
        Z = rng.binomial(2, 0.3, (200, 4)).astype(float)
        batch = fit_nuisance_columns(Z, X, "binomial")
        for j in range(4):
            np.testing.assert_allclose(batch[j].theta, fit_nuisance(Z[:, j], X, "binomial").theta, atol=1e-10)

    @given(st.integers(0, 10_000))
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        z, X = logistic_data(rng, n=120)
        if z.min() == z.max():
            return
        perm = rng.permutation(z.size)
        try:
            a = fit_nuisance(z, X, "logistic").theta
        except NuisanceError:
            return
        b = fit_nuisance(z[perm], X[perm], "logistic").theta
        np.testing.assert_allclose(a, b, atol=1e-10)


class TestCenter:
    def test_intercept_only_mean_zero(self, rng):
        Z = rng.binomial(2, 0.3, (60, 3)).astype(float)
        X = np.ones((60, 1))
        cg = center_genotypes(fit_nuisance_columns(Z, X, "binomial"), Z, X)
        np.testing.assert_allclose(cg.zstar, Z - Z.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(cg.zstar.mean(axis=0), 0.0, atol=1e-12)

    @pytest.mark.parametrize("value", [0.0, 1.0])
    def test_constant_column(self, value):
        Z = np.full((30, 1), value)
        X = np.column_stack([np.ones(30), np.linspace(0, 1, 30)])
        cg = center_genotypes(fit_nuisance_columns(Z, X, "logistic"), Z, X)
        assert np.all(cg.zstar == 0) and cg.degenerate
        assert np.all(cg.influence == 0) and np.all(cg.gradient == 0)

    @pytest.mark.parametrize("kind,trials", [("logistic", 1), ("binomial", 2)])
    def test_score_equations(self, rng, kind, trials):
        z, X = logistic_data(rng, q=1, trials=trials)
        cg = center_genotypes([fit_nuisance(z, X, kind)], z, X)
        assert np.max(np.abs(X.T @ cg.zstar[:, 0])) <= 1e-6

    def test_empirical_strata_sum_zero(self, rng):
        X = design(rng, 90, 1, discrete=True)
        Z = rng.binomial(2, 0.3, (90, 2)).astype(float)
        cg = center_genotypes(fit_nuisance_columns(Z, X, "empirical"), Z, X)
        for level in np.unique(X[:, 1]):
            assert np.all(np.abs(cg.zstar[X[:, 1] == level].sum(axis=0)) < 1e-12)

    def test_empirical_influence(self, rng):
        X = design(rng, 40, 1, discrete=True)
        m = fit_nuisance(rng.integers(0, 2, 40).astype(float), X, "empirical")
        U = influence(m, X)
        levels, inv, sizes = np.unique(X, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        for i in range(40):
            expected = np.zeros(levels.shape[0])
            expected[inv[i]] = 40 / sizes[inv[i]]
            np.testing.assert_array_equal(U[i], expected)

    def test_influence_solves_fisher(self, rng):
        z, X = logistic_data(rng)
        m = fit_nuisance(z, X, "logistic")
        np.testing.assert_allclose(influence(m, X) @ m.fisher_info, X, atol=1e-10)

    def test_subject_mismatch(self, rng):
        z, X = logistic_data(rng, n=50)
        m = fit_nuisance(z, X, "logistic")
        with pytest.raises(NuisanceError):
            center_genotypes([m], z[:40], X[:40])

    @pytest.mark.parametrize("kind,trials", [("logistic", 1), ("binomial", 2)])
    def test_gradient_finite_difference(self, rng, kind, trials):
        z, X = logistic_data(rng, trials=trials)
        m = fit_nuisance(z, X, kind)
        G = mean_gradient(m, X)
        h = 1e-5
        for a in range(X.shape[1]):
            e = np.zeros(X.shape[1])
            e[a] = h
            fd = trials * (expit(X @ (m.theta + e)) - expit(X @ (m.theta - e))) / (2 * h)
            np.testing.assert_allclose(G[:, a], fd, rtol=1e-6, atol=1e-12)


class TestCoupling:
    @pytest.fixture
    def setup(self, rng):
        Z = rng.binomial(1, 0.3, (80, 3)).astype(float)
        X = design(rng, 80, 2)
        cg = center_genotypes(fit_nuisance_columns(Z, X, "logistic"), Z, X)
        return cg, X

    def test_zero_scores(self, setup):
        cg, _ = setup
        assert np.all(coupling_matrices(np.zeros((cg.n, 2)), cg) == 0)

    def test_intercept_only_closed_form(self, rng):
        z = rng.integers(0, 2, 50).astype(float)
        X = np.ones((50, 1))
        cg = center_genotypes([fit_nuisance(z, X, "logistic")], z, X)
        xi = rng.normal(size=(50, 2))
        p = z.mean()
        np.testing.assert_allclose(coupling_matrices(xi, cg)[:, 0, 0], p * (1 - p) * xi.mean(axis=0), rtol=1e-10)

    def test_brute_force(self, setup, rng):
        cg, X = setup
        xi = rng.normal(size=(cg.n, 2))
        A = coupling_matrices(xi, cg)
        for k in range(2):
            for j in range(cg.s):
                for a in range(X.shape[1]):
                    total = 0.0
                    for i in range(cg.n):
                        total += xi[i, k] * cg.gradient[j, i, a]
                    assert A[k, j, a] == pytest.approx(total / cg.n, rel=1e-12, abs=1e-15)

    def test_mismatch(self, setup):
        cg, _ = setup
        with pytest.raises(NuisanceError):
            coupling_matrices(np.zeros((cg.n - 1, 2)), cg)
