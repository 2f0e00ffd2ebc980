"""Genotype-given-covariate models, centering and influence terms.

Three kinds of model for E(z_j | x) are supported:

``empirical``
    stratum means of z_j over the distinct rows of x (discrete covariates);
``logistic``
    canonical-link GLM for z_j in [0, 1];
``binomial``
    canonical-link GLM for z_j in [0, 2] treated as two Bernoulli trials.

For a GLM the estimator expansion is theta_hat - theta = n^-1 sum_i U(x_i)
z*_i with U(x) = I^-1 x, I = n^-1 sum v_i x_i x_i' and v the variance
weight.  The gradient of the fitted mean in theta is v_i x_i.  For the
empirical kind both play the same role with stratum indicators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import CovariateMatrix

KINDS = ("empirical", "logistic", "binomial")
SEPARATION_NORM = 1e3
IRLS_TOL = 1e-10
IRLS_MAX_ITER = 100


class NuisanceError(ValueError):
    pass


@dataclass(frozen=True)
class NuisanceModel:
    """Fitted model for one genotype column.

    ``theta`` holds GLM coefficients, or stratum means for the empirical
    kind.  ``fisher_info`` is n^-1 sum v x x' (stratum proportions on the
    diagonal for the empirical kind).  ``degenerate`` marks a constant column
    sitting on the boundary of its range, whose centered values are zero.
    """

    kind: str
    theta: np.ndarray
    fisher_info: np.ndarray
    converged: bool
    fitted: np.ndarray
    degenerate: bool = False
    n_iter: int = 0


@dataclass(frozen=True)
class CenteredGenotypes:
    """Centered window genotypes with per-subject influence and gradients.

    Shapes: ``zstar`` (n, s); ``influence`` and ``gradient`` (s, n, d).
    """

    ids: tuple
    zstar: np.ndarray
    influence: np.ndarray
    gradient: np.ndarray

    @property
    def n(self) -> int:
        return self.zstar.shape[0]

    @property
    def s(self) -> int:
        return self.zstar.shape[1]

    @property
    def degenerate(self) -> bool:
        return not np.any(self.zstar)


def _design(x) -> np.ndarray:
    if isinstance(x, CovariateMatrix):
        return np.asarray(x.values, dtype=float)
    X = np.asarray(x, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _strata(X: np.ndarray):
    _, inverse, sizes = np.unique(X, axis=0, return_inverse=True, return_counts=True)
    return inverse.ravel(), sizes


def _trials(kind: str) -> float:
    return 2.0 if kind == "binomial" else 1.0


def _check_range(Z: np.ndarray, kind: str):
    hi = _trials(kind)
    if np.any(Z < 0.0) or np.any(Z > hi):
        raise NuisanceError(f"{kind} model needs genotypes in [0, {hi:g}]")


def _irls(Z: np.ndarray, X: np.ndarray, kind: str):
    """Batched Newton/IRLS over columns of ``Z``; returns (theta, fitted, converged, iters)."""
    n, s = Z.shape
    d = X.shape[1]
    m = _trials(kind)
    ybar = np.clip(Z.mean(axis=0) / m, 1e-6, 1 - 1e-6)
    theta = np.zeros((s, d))
    theta[:, 0] = np.log(ybar / (1 - ybar)) if np.allclose(X[:, 0], 1.0) else 0.0
    converged = np.zeros(s, dtype=bool)
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        p = expit(X @ theta.T)  # (n, s)
        mu = m * p
        v = m * p * (1 - p)
        score = X.T @ (Z - mu)  # (d, s)
        info = np.einsum("ns,na,nb->sab", v, X, X)
        try:
            step = np.linalg.solve(info, score.T[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NuisanceError("singular covariate design in nuisance fit") from exc
        theta = theta + step
        if np.any(np.linalg.norm(theta, axis=1) > SEPARATION_NORM):
            raise NuisanceError(
                "nuisance coefficients diverge (separation); use the empirical kind for these markers"
            )
        # a vanishing score alone is not convergence: under separation the
        # score decays while theta keeps growing
        converged = np.max(np.abs(step), axis=1) < IRLS_TOL
        if converged.all():
            break
    p = expit(X @ theta.T)
    return theta, m * p, converged, it


def fit_nuisance_columns(Z, x, kind: str = "binomial") -> list[NuisanceModel]:
    """Fit one nuisance model per column of ``Z`` (n, s) sharing covariates ``x``."""
    if kind not in KINDS:
        raise ValueError(f"unknown nuisance kind {kind!r}")
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    X = _design(x)
    n, d = X.shape
    if Z.shape[0] != n:
        raise NuisanceError("genotype and covariate rows differ")
    if not np.all(np.isfinite(Z)):
        raise NuisanceError("genotypes contain missing values; impute first")
    if kind == "empirical":
        labels, sizes = _strata(X)
        sums = np.zeros((sizes.size, Z.shape[1]))
        np.add.at(sums, labels, Z)
        means = sums / sizes[:, None]
        info = np.diag(sizes / n)
        return [
            NuisanceModel("empirical", means[:, j].copy(), info, True, means[labels, j], False)
            for j in range(Z.shape[1])
        ]
    if n <= d:
        raise NuisanceError("need more subjects than covariate columns")
    if np.linalg.matrix_rank(X) < d:
        raise NuisanceError("singular covariate design in nuisance fit")
    _check_range(Z, kind)
    hi = _trials(kind)
    lo_const = np.all(Z == 0.0, axis=0)
    hi_const = np.all(Z == hi, axis=0)
    boundary = lo_const | hi_const
    models: list[NuisanceModel | None] = [None] * Z.shape[1]
    for j in np.flatnonzero(boundary):
        theta = np.full(d, np.nan)
        models[j] = NuisanceModel(kind, theta, np.zeros((d, d)), True, Z[:, j].copy(), True)
    live = np.flatnonzero(~boundary)
    if live.size:
        theta, fitted, conv, iters = _irls(Z[:, live], X, kind)
        p = fitted / hi
        v = hi * p * (1 - p)
        info = np.einsum("ns,na,nb->sab", v, X, X) / n
        for col, j in enumerate(live):
            models[j] = NuisanceModel(kind, theta[col], info[col], bool(conv[col]), fitted[:, col], False, iters)
    return models


def fit_nuisance(z, x, kind: str = "binomial") -> NuisanceModel:
    """Fit E(z | x) for a single genotype column."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError("expected a single genotype column")
    return fit_nuisance_columns(z[:, None], x, kind)[0]


def mean_gradient(model: NuisanceModel, x) -> np.ndarray:
    """d g(theta, x_i) / d theta at the fit; shape (n, d)."""
    X = _design(x)
    if model.kind == "empirical":
        labels, sizes = _strata(X)
        return np.eye(sizes.size)[labels]
    if model.degenerate:
        return np.zeros_like(X)
    hi = _trials(model.kind)
    p = model.fitted / hi
    return (hi * p * (1 - p))[:, None] * X


def influence(model: NuisanceModel, x) -> np.ndarray:
    """U(x_i) for every subject; shape (n, d)."""
    X = _design(x)
    if model.kind == "empirical":
        labels, sizes = _strata(X)
        n = X.shape[0]
        return np.eye(sizes.size)[labels] * (n / sizes[labels])[:, None]
    if model.degenerate:
        return np.zeros_like(X)
    return np.linalg.solve(model.fisher_info, X.T).T


def center_genotypes(models, Z, x, ids=None) -> CenteredGenotypes:
    """z*_ij = z_ij - g_j(theta_j, x_i) with influence and gradient terms."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    X = _design(x)
    if Z.shape[0] != X.shape[0] or len(models) != Z.shape[1]:
        raise NuisanceError("subject or marker mismatch between models and genotypes")
    for m in models:
        if m.fitted.shape[0] != Z.shape[0]:
            raise NuisanceError("nuisance model fitted on different subjects")
    zstar = Z - np.stack([m.fitted for m in models], axis=1)
    zstar[:, [m.degenerate for m in models]] = 0.0
    U = np.stack([influence(m, X) for m in models])
    G = np.stack([mean_gradient(m, X) for m in models])
    ids = tuple(range(Z.shape[0])) if ids is None else tuple(ids)
    return CenteredGenotypes(ids, zstar, U, G)


def coupling_matrices(scores, cg: CenteredGenotypes) -> np.ndarray:
    """A[k, j, :] = n^-1 sum_i xi_ik gdot_j(x_i); shape (K, s, d)."""
    xi = np.asarray(getattr(scores, "scores", scores), dtype=float)
    if xi.shape[0] != cg.n:
        raise NuisanceError("scores and genotypes cover different subjects")
    return np.einsum("nk,snd->ksd", xi, cg.gradient) / cg.n
