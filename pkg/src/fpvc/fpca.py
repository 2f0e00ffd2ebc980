"""Functional principal components from sparse longitudinal data."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import LongitudinalDataset, OutcomeScaling
from .smoothing import (
    BinningMode,
    CovSurface,
    EvalGrid,
    MeanCurve,
    estimate_sigma2,
    local_linear_mean,
    local_linear_surface,
    raw_covariance,
    select_bandwidth,
)

logger = logging.getLogger(__name__)


class FpcaError(ValueError):
    pass


@dataclass(frozen=True)
class FpcaConfig:
    """Settings for :func:`fit_fpca`.

    ``fve`` is the fraction of variation the retained components must
    explain; ``n_grid`` the number of evaluation points.  Bandwidths are
    selected automatically unless given.
    """

    fve: float = 0.99
    n_grid: int = 51
    h_mean: float | None = None
    h_cov: float | None = None
    bandwidth_method: Literal["gcv", "loocv"] = "gcv"
    binning: BinningMode = "auto"
    max_k: int | None = None

    def __post_init__(self):
        if not 0.0 < self.fve <= 1.0:
            raise ValueError("fve must lie in (0, 1]")


@dataclass(frozen=True)
class FpcaModel:
    """Fitted mean, covariance surface and retained eigen-components.

    ``eigenfunctions`` has shape (K, M); rows are orthonormal under the
    rectangle rule on the grid.
    """

    grid: EvalGrid
    mean: MeanCurve
    surface: CovSurface
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    sigma2: float
    fve: float
    all_eigenvalues: np.ndarray
    label: str = "outcome"
    scaling: OutcomeScaling | None = None

    @property
    def k(self) -> int:
        return int(self.eigenvalues.size)

    def phi(self, t) -> np.ndarray:
        """Eigenfunctions at ``t``; shape (K, len(t))."""
        return self.grid.interp(self.eigenfunctions, np.asarray(t, dtype=float))

    def mu(self, t) -> np.ndarray:
        return self.mean(t)

    def cov(self, s, t) -> np.ndarray:
        return self.surface(s, t)


@dataclass(frozen=True)
class Trajectory:
    grid: EvalGrid
    values: np.ndarray


def eigendecompose(surface: CovSurface | np.ndarray, grid: EvalGrid):
    """Eigen-pairs of the covariance operator discretized on ``grid``.

    Returns all eigenvalues in nonincreasing order and the matching
    eigenfunctions (rows), normalized to unit quadrature norm and signed to
    have a nonnegative integral (ties: nonnegative value at the midpoint).
    """
    g = surface.values if isinstance(surface, CovSurface) else np.asarray(surface, dtype=float)
    if not np.all(np.isfinite(g)):
        raise FpcaError("covariance surface has non-finite entries")
    delta = grid.spacing
    vals, vecs = np.linalg.eigh(0.5 * (g + g.T) * delta)
    order = np.argsort(vals, kind="stable")[::-1]
    vals = vals[order]
    phis = (vecs[:, order] / np.sqrt(delta)).T
    integral = phis.sum(axis=1) * delta
    mid = phis[:, grid.m // 2]
    scale = np.max(np.abs(phis), axis=1)
    flip = (integral < -1e-10 * scale) | ((np.abs(integral) <= 1e-10 * scale) & (mid < 0))
    phis[flip] *= -1.0
    return vals, phis


def fve_curve(eigenvalues) -> np.ndarray:
    lam = np.asarray(eigenvalues, dtype=float)
    pos = lam[lam > 0]
    if pos.size == 0:
        raise FpcaError("no positive eigenvalue")
    return np.cumsum(pos) / pos.sum()


def select_k(eigenvalues, threshold: float = 0.99) -> int:
    """Smallest K whose positive-eigenvalue share reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    curve = fve_curve(eigenvalues)
    # guard against cumulative round-off just below the threshold
    return int(np.argmax(curve >= threshold - 1e-12) + 1)


fit_counter = {"fit_fpca": 0}


def fit_fpca(ds: LongitudinalDataset, config: FpcaConfig | None = None, *, scaling: OutcomeScaling | None = None) -> FpcaModel:
    """Smooth mean and covariance, estimate noise and retain top components."""
    cfg = config or FpcaConfig()
    fit_counter["fit_fpca"] += 1
    lo, hi = ds.domain
    grid = EvalGrid.over(lo, hi, cfg.n_grid)
    h_mean = cfg.h_mean or select_bandwidth(ds, "mean", grid, method=cfg.bandwidth_method)
    mean = local_linear_mean(ds, h_mean, grid)
    raw = raw_covariance(ds, mean)
    if raw.n_pairs == 0:
        raise FpcaError("no subject has two or more observations; covariance is not estimable")
    h_cov = cfg.h_cov or select_bandwidth(
        ds, "surface", grid, raw=raw, method=cfg.bandwidth_method, binning=cfg.binning
    )
    surface = local_linear_surface(raw, h_cov, grid, binning=cfg.binning)
    sigma2 = estimate_sigma2(raw, surface, grid)
    surface = CovSurface(grid=grid, values=surface.values, bandwidth=h_cov, sigma2=sigma2)
    vals, phis = eigendecompose(surface, grid)
    # residual products at round-off level of the data count as zero covariance
    y_scale = float(np.max(np.abs(ds.pooled()[1])))
    floor = (1e-8 * y_scale) ** 2 * (hi - lo)
    if not np.any(vals > floor):
        raise FpcaError("covariance surface has no positive eigenvalue")
    k = select_k(vals, cfg.fve)
    if cfg.max_k is not None:
        k = min(k, cfg.max_k)
    fve = float(fve_curve(vals)[k - 1])
    lam = vals[:k].copy()
    ef = phis[:k].copy()
    allv = vals.copy()
    for a in (lam, ef, allv):
        a.setflags(write=False)
    logger.debug("fpca %s: K=%d fve=%.4f sigma2=%.4g h=(%.3g, %.3g)", ds.label, k, fve, sigma2, h_mean, h_cov)
    return FpcaModel(
        grid=grid,
        mean=mean,
        surface=surface,
        eigenvalues=lam,
        eigenfunctions=ef,
        sigma2=sigma2,
        fve=fve,
        all_eigenvalues=allv,
        label=ds.label,
        scaling=scaling,
    )


def predict_trajectory(model: FpcaModel, scores) -> Trajectory:
    """Mean curve plus the score-weighted eigenfunctions on the model grid."""
    xi = np.asarray(scores, dtype=float)
    if xi.shape != (model.k,):
        raise ValueError(f"expected {model.k} scores, got shape {xi.shape}")
    return Trajectory(grid=model.grid, values=model.mean.values + xi @ model.eigenfunctions)
