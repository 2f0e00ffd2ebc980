import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TWO_PI, make_dataset, rank_two
from fpvc.data import LongitudinalDataset
from fpvc.fpca import (
    FpcaConfig,
    FpcaError,
    eigendecompose,
    fit_fpca,
    fve_curve,
    predict_trajectory,
    select_k,
)
from fpvc.sim import SimConfig, replicate_rng, simulate_cohort
from fpvc.smoothing import EvalGrid, local_linear_mean

GRID = EvalGrid.over(0.0, TWO_PI, 51)
ROOT_PI = math.sqrt(math.pi)


def assert_orthonormal(phis, grid, tol=1e-6):
    gram = phis @ phis.T * grid.spacing
    np.testing.assert_allclose(gram, np.eye(phis.shape[0]), atol=tol)


class TestEigendecompose:
    def test_rank_one(self):
        phi = np.sin(GRID.points) / ROOT_PI
        vals, phis = eigendecompose(2.0 * np.outer(phi, phi), GRID)
        assert vals[0] == pytest.approx(2.0, rel=1e-3)
        assert np.max(np.abs(vals[1:])) < 1e-10
        err = min(np.max(np.abs(phis[0] - s * phi)) for s in (1, -1))
        assert err < 1e-3

    def test_zero_operator(self):
        vals, _ = eigendecompose(np.zeros((GRID.m, GRID.m)), GRID)
        assert np.all(vals == 0)
        with pytest.raises(FpcaError):
            select_k(vals)

    def test_identity_like(self):
        vals, phis = eigendecompose(np.eye(GRID.m), GRID)
        np.testing.assert_allclose(vals, GRID.spacing, rtol=1e-10)
        assert_orthonormal(phis, GRID, 1e-10)

    def test_non_finite(self):
        g = np.eye(GRID.m)
        g[3, 3] = np.nan
        with pytest.raises(FpcaError):
            eigendecompose(g, GRID)

    def test_sign_convention(self, rng):
        a = rng.normal(size=(GRID.m, 6))
        vals, phis = eigendecompose(a @ a.T, GRID)
        integral = phis.sum(axis=1) * GRID.spacing
        assert np.all(integral >= -1e-10)

    @given(st.integers(0, 10_000))
    def test_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(GRID.m, GRID.m))
        g = 0.5 * (a + a.T)
        vals, phis = eigendecompose(g, GRID)
        rebuilt = (phis.T * vals) @ phis
        np.testing.assert_allclose(rebuilt, g, atol=1e-8)
        assert np.all(np.diff(vals) <= 1e-12)
        assert_orthonormal(phis, GRID)


class TestSelectK:
    def test_hand_example(self):
        assert select_k([9.0, 0.9, 0.1], 0.99) == 2

    def test_single_positive(self):
        for thr in (0.1, 0.5, 1.0):
            assert select_k([3.0, -0.2, -1.0], thr) == 1

    def test_negatives_excluded_from_denominator(self):
        np.testing.assert_allclose(fve_curve([3.0, 1.0, -2.0]), [0.75, 1.0])

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            select_k([1.0], 0.0)

    @given(st.lists(st.floats(-1.0, 10.0), min_size=1, max_size=15), st.floats(0.01, 1.0))
    def test_minimal_crossing(self, raw, thr):
        lam = np.sort(np.array(raw))[::-1]
        if not np.any(lam > 1e-6):
            return
        curve = fve_curve(lam)
        assert np.all(np.diff(curve) >= 0)
        k = select_k(lam, thr)
        assert curve[k - 1] >= thr - 1e-12
        assert k == 1 or curve[k - 2] < thr - 1e-12


class TestFitFpca:
    def test_orthonormal_and_signed(self, rng):
        ds, _ = rank_two(rng, n=200)
        m = fit_fpca(ds)
        assert_orthonormal(m.eigenfunctions, m.grid)
        assert np.all(m.eigenfunctions.sum(axis=1) * m.grid.spacing >= -1e-10)
        assert np.all(m.eigenvalues > 0) and np.all(np.diff(m.eigenvalues) <= 0)
        assert 0 < m.fve <= 1

    def test_deterministic(self, rng):
        ds, _ = rank_two(rng, n=150)
        a, b = fit_fpca(ds), fit_fpca(ds)
        np.testing.assert_array_equal(a.eigenfunctions, b.eigenfunctions)
        np.testing.assert_array_equal(a.surface.values, b.surface.values)
        assert a.sigma2 == b.sigma2

    def test_zero_covariance_errors(self):
        ds = LongitudinalDataset(("a",), (np.linspace(0, TWO_PI, 12),), (np.full(12, 3.0),), domain=(0.0, TWO_PI))
        with pytest.raises(FpcaError):
            fit_fpca(ds, FpcaConfig(h_mean=1.0, h_cov=1.0))

    def test_no_pairs_errors(self, rng):
        ds = make_dataset(rng, 30, lambda t, i, _: t, lam=0.0)
        single = LongitudinalDataset(ds.ids, tuple(t[:1] for t in ds.times), tuple(y[:1] for y in ds.values), domain=ds.domain)
        with pytest.raises(FpcaError):
            fit_fpca(single, FpcaConfig(h_mean=2.0))

    def test_three_components(self):
        # constant, sine and cosine directions with variances (4, 2, 1)
        c0 = 1.0 / math.sqrt(TWO_PI)
        for seed in range(4):
            rng = np.random.default_rng(seed)
            xi = rng.normal(0, np.sqrt([4.0, 2.0, 1.0]), (500, 3))
            ds = make_dataset(
                rng,
                500,
                lambda t, i, _: xi[i, 0] * c0 + xi[i, 1] * np.sin(t) / ROOT_PI + xi[i, 2] * np.cos(t) / ROOT_PI,
                noise=0.5,
            )
            assert fit_fpca(ds, FpcaConfig(h_cov=2.0)).k == 3

    def test_simulation_design_gamma0(self):
        # G(s, t) = 0.25 + 0.0625 cos(s/4) cos(t/4) plus noise 0.25
        cohort = simulate_cohort(SimConfig(n=20000, gamma=0.0), replicate_rng(3, 0))
        m = fit_fpca(cohort.outcomes[0])
        assert m.k == 2
        g = EvalGrid.over(0.0, TWO_PI, 51)
        truth = eigendecompose(0.25 + 0.0625 * np.outer(np.cos(g.points / 4), np.cos(g.points / 4)), g)[0]
        assert m.eigenvalues[0] == pytest.approx(truth[0], rel=0.1)
        assert m.eigenvalues[0] / m.eigenvalues[1] == pytest.approx(truth[0] / truth[1], rel=0.5)
        assert m.sigma2 == pytest.approx(0.25, abs=0.05)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(1)
        xi = rng.normal(0, [2.0, 1.0], (300, 2))
        ds = make_dataset(rng, 300, lambda t, i, _: 1 + xi[i, 0] * np.sin(t) / ROOT_PI + xi[i, 1] * np.cos(t) / ROOT_PI)
        cfg = FpcaConfig(h_mean=1.0, h_cov=1.0, max_k=2)
        a = fit_fpca(ds, cfg)
        b = fit_fpca(ds.map_values(lambda y: 3.0 * y), cfg)
        np.testing.assert_allclose(b.mean.values, 3 * a.mean.values, rtol=1e-10)
        np.testing.assert_allclose(b.eigenvalues, 9 * a.eigenvalues, rtol=1e-8)
        for pa, pb in zip(a.eigenfunctions, b.eigenfunctions):
            assert min(np.max(np.abs(pa - s * pb)) for s in (1, -1)) < 1e-8

    def test_max_k(self, rng):
        ds, _ = rank_two(rng, n=150)
        assert fit_fpca(ds, FpcaConfig(max_k=1)).k == 1

    def test_off_grid_evaluation(self, rng):
        ds, _ = rank_two(rng, n=100)
        m = fit_fpca(ds)
        t = m.grid.points[[3, 10]]
        np.testing.assert_allclose(m.phi(t), m.eigenfunctions[:, [3, 10]])
        np.testing.assert_allclose(m.mu(t), m.mean.values[[3, 10]])


class TestTrajectory:
    @pytest.fixture
    def model(self, rng):
        return fit_fpca(rank_two(rng, n=150)[0])

    def test_zero_scores_give_mean(self, model):
        np.testing.assert_array_equal(predict_trajectory(model, np.zeros(model.k)).values, model.mean.values)

    def test_unit_score(self, model):
        xi = np.zeros(model.k)
        xi[0] = 1.0
        np.testing.assert_allclose(predict_trajectory(model, xi).values, model.mean.values + model.eigenfunctions[0])

    def test_length_mismatch(self, model):
        with pytest.raises(ValueError):
            predict_trajectory(model, np.zeros(model.k + 1))

    def test_group_average_matches_direct_smoothing(self):
        from fpvc.scores import blup_scores

        rng = np.random.default_rng(9)
        n = 400
        group = rng.integers(0, 2, n)
        xi = rng.normal(0, [1.0, 0.5], (n, 2))
        shift = np.where(group == 1, 0.8, -0.8)
        ds = make_dataset(
            rng, n, lambda t, i, _: (xi[i, 0] + shift[i]) * np.sin(t) / ROOT_PI + xi[i, 1] * np.cos(t) / ROOT_PI, noise=0.5
        )
        m = fit_fpca(ds)
        sc = blup_scores(m, ds)
        central = (m.grid.points >= TWO_PI / 8) & (m.grid.points <= 7 * TWO_PI / 8)
        for g in (0, 1):
            idx = np.flatnonzero(group == g)
            avg = predict_trajectory(m, sc.scores[idx].mean(axis=0)).values
            sub = ds.subset([ds.ids[i] for i in idx])
            direct = local_linear_mean(sub, 1.0, m.grid).values
            assert np.max(np.abs(avg - direct)[central]) <= 0.2
