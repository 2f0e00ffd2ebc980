"""The FPVC variance-component statistic, its null mixture and p-value utilities."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from .chisq_mixture import CF_INVERSION, clean_weights, mixture_survival
from .data import CovariateMatrix, GenotypeMatrix, LongitudinalDataset, standardize_outcome
from .fpca import FpcaConfig, FpcaModel, fit_fpca
from .nuisance import CenteredGenotypes, center_genotypes, coupling_matrices, fit_nuisance_columns
from .scores import ScoreMatrix, compute_scores

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VcConfig:
    """Options for :func:`fpvc_test`.

    ``nuisance_kind`` defaults to ``logistic`` for dominant-coded genotypes
    and ``binomial`` otherwise.  ``outcome_weights`` multiplies each
    outcome's block of the statistic (default all ones); it is a hook, no
    adaptive rule is supplied.
    """

    score_kind: str = "blup"
    nuisance_kind: str | None = None
    tail_method: str = "auto"
    outcome_weights: tuple | None = None


@dataclass(frozen=True)
class VcTestResult:
    Q: float
    weights: np.ndarray
    p_value: float
    method_used: str
    n: int
    s: int
    k: tuple
    degenerate: bool = False


@dataclass(frozen=True)
class NullComponents:
    """Centered per-subject contributions, columns ordered by (outcome, k, marker)."""

    values: np.ndarray
    columns: tuple = field(default=())

    @property
    def L(self) -> int:
        return self.values.shape[1]


def _score_arrays(scores) -> list[np.ndarray]:
    if isinstance(scores, (ScoreMatrix, np.ndarray)):
        scores = [scores]
    out = [np.asarray(getattr(s, "scores", s), dtype=float) for s in scores]
    if not out:
        raise ValueError("need at least one outcome")
    return out


def _outcome_weights(w, m: int) -> np.ndarray:
    if w is None:
        return np.ones(m)
    w = np.asarray(w, dtype=float)
    if w.shape != (m,) or np.any(w < 0):
        raise ValueError("outcome weights must be nonnegative, one per outcome")
    return w


def q_statistic(scores, zstar, outcome_weights=None) -> float:
    """Q = sum_m w_m || xi_m' z* ||_F^2 / n."""
    xs = _score_arrays(scores)
    zs = np.asarray(getattr(zstar, "zstar", zstar), dtype=float)
    if zs.ndim == 1:
        zs = zs[:, None]
    n = zs.shape[0]
    w = _outcome_weights(outcome_weights, len(xs))
    total = 0.0
    for wm, xi in zip(w, xs):
        if xi.shape[0] != n:
            raise ValueError("scores and genotypes cover different subjects")
        total += wm * float(np.sum((xi.T @ zs) ** 2))
    return float(total / n)


def null_components(scores, cg: CenteredGenotypes, couplings=None, outcome_weights=None) -> NullComponents:
    """Columns (xi_ik - A_kj U_j(x_i)) z*_ij, empirically centered."""
    xs = _score_arrays(scores)
    if couplings is None:
        couplings = [coupling_matrices(xi, cg) for xi in xs]
    w = _outcome_weights(outcome_weights, len(xs))
    blocks, cols = [], []
    for m, (xi, A) in enumerate(zip(xs, couplings)):
        adj = np.einsum("ksd,snd->nks", A, cg.influence)  # (n, K, s)
        comp = (xi[:, :, None] - adj) * cg.zstar[:, None, :]
        blocks.append(np.sqrt(w[m]) * comp.reshape(cg.n, -1))
        cols.extend((m, k, j) for k in range(xi.shape[1]) for j in range(cg.s))
    vals = np.concatenate(blocks, axis=1)
    vals = vals - vals.mean(axis=0, keepdims=True)
    return NullComponents(vals, tuple(cols))


def null_weights(nc: NullComponents | np.ndarray) -> np.ndarray:
    """Eigenvalues of the component covariance, clamped at 0, nonincreasing."""
    v = np.asarray(getattr(nc, "values", nc), dtype=float)
    n = v.shape[0]
    if n < 2:
        raise ValueError("need at least two subjects")
    vc = v - v.mean(axis=0, keepdims=True)
    if v.shape[1] > n:
        # nonzero spectrum of the L x L covariance equals that of the n x n Gram matrix
        ev = np.linalg.eigvalsh(vc @ vc.T / (n - 1))
    else:
        ev = np.linalg.eigvalsh(vc.T @ vc / (n - 1))
    return np.sort(np.clip(ev, 0.0, None))[::-1]


def fpvc_test_scores(scores, Z, x, config: VcConfig | None = None, *, ids=None) -> VcTestResult:
    """Test one marker set given precomputed, aligned score matrices.

    Parameters
    ----------
    scores : ScoreMatrix, array or sequence of them
        One (n, K_m) block per outcome, rows aligned with ``Z`` and ``x``.
    Z : (n, s) array
        Imputed window genotypes.
    x : CovariateMatrix or (n, d) array
        Covariates with leading intercept.
    """
    cfg = config or VcConfig()
    xs = _score_arrays(scores)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n, s = Z.shape
    ks = tuple(int(xi.shape[1]) for xi in xs)
    models = fit_nuisance_columns(Z, x, cfg.nuisance_kind or "binomial")
    cg = center_genotypes(models, Z, x, ids=ids)
    return _finish(xs, cg, cfg, ks)


def _finish(xs, cg: CenteredGenotypes, cfg: VcConfig, ks) -> VcTestResult:
    n, s = cg.n, cg.s
    empty = np.zeros(0)
    if cg.degenerate:
        warnings.warn("window has no genotype variation after centering; p set to 1", RuntimeWarning, stacklevel=3)
        return VcTestResult(0.0, empty, 1.0, CF_INVERSION, n, s, ks, True)
    q = q_statistic(xs, cg.zstar, cfg.outcome_weights)
    nc = null_components(xs, cg, outcome_weights=cfg.outcome_weights)
    a = null_weights(nc)
    try:
        a = clean_weights(a)
    except ValueError:
        warnings.warn("null covariance is zero; p set to 1", RuntimeWarning, stacklevel=3)
        return VcTestResult(q, empty, 1.0, CF_INVERSION, n, s, ks, True)
    tail = mixture_survival(a, q, method=cfg.tail_method)
    return VcTestResult(q, a, float(np.clip(tail.p, 0.0, 1.0)), tail.method, n, s, ks)


# ---------------------------------------------------------------------------
# end-to-end helpers
# ---------------------------------------------------------------------------


def prepare_outcome(ds: LongitudinalDataset, fpca_config: FpcaConfig | None = None, kind: str = "blup"):
    """Standardize, fit FPCA and compute scores once for an outcome."""
    std, scaling = standardize_outcome(ds)
    model = fit_fpca(std, fpca_config, scaling=scaling)
    return model, compute_scores(model, std, kind)


def _common_ids(datasets, geno, covar) -> list:
    sets = [set(d.ids) for d in datasets] + [set(geno.ids)]
    if covar is not None:
        sets.append(set(covar.ids))
    common = set.intersection(*sets)
    order = [i for i in datasets[0].ids if i in common]
    dropped = max(len(s) for s in sets) - len(order)
    if dropped:
        logger.warning("%d subjects dropped when intersecting outcomes, genotypes and covariates", dropped)
        warnings.warn(f"{dropped} subjects not shared by all inputs were dropped", RuntimeWarning, stacklevel=3)
    if len(order) < 3:
        raise ValueError("fewer than three subjects shared by all inputs")
    return order


def fpvc_test(
    models: Sequence[FpcaModel],
    datasets: Sequence[LongitudinalDataset],
    geno: GenotypeMatrix,
    markers: Sequence[str] | None = None,
    covar: CovariateMatrix | None = None,
    config: VcConfig | None = None,
) -> VcTestResult:
    """Full test for one marker set from fitted FPCA models and raw outcomes.

    Outcomes are rescaled with each model's stored scaling, scored, aligned
    with genotypes and covariates on shared subjects, then tested.  The
    genotypes must already be coded and imputed.
    """
    cfg = config or VcConfig()
    if len(models) != len(datasets):
        raise ValueError("one model per outcome is required")
    ids = _common_ids(datasets, geno, covar)
    g = geno.subset(ids)
    if markers is not None:
        pos = {m: j for j, m in enumerate(g.marker_ids)}
        g = g.select_markers([pos[m] if m in pos else int(m) for m in markers])
    if cfg.nuisance_kind is None:
        cfg = replace(cfg, nuisance_kind="logistic" if g.coding == "dominant" else "binomial")
    xs = []
    for model, ds in zip(models, datasets):
        d = ds.subset(ids)
        if model.scaling is not None:
            d = d.map_values(model.scaling.apply)
        xs.append(compute_scores(model, d, cfg.score_kind).scores)
    x = covar.subset(ids) if covar is not None else CovariateMatrix.intercept_only(ids)
    return fpvc_test_scores(xs, g.values, x, cfg, ids=ids)


# ---------------------------------------------------------------------------
# p-value utilities
# ---------------------------------------------------------------------------


def fisher_combine(pvals) -> float:
    """Fisher's method: chi-square(2m) survival at -2 sum log p."""
    p = np.asarray(pvals, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("no p-values to combine")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if np.any(p == 0):
        warnings.warn("zero p-value clamped to the smallest positive double", RuntimeWarning, stacklevel=2)
        p = np.where(p == 0, np.nextafter(0.0, 1.0), p)
    if p.size == 1:
        return float(p[0])
    x = -2.0 * np.sum(np.log(p))
    return float(stats.chi2.sf(x, 2 * p.size))


@dataclass(frozen=True)
class BhResult:
    rejected: np.ndarray
    threshold: float
    n_rejected: int


def bh_reject(pvals, q: float = 0.1) -> BhResult:
    """Benjamini-Hochberg step-up at FDR ``q``.

    ``threshold`` is the cutoff r* q / m actually used, or q / m (the
    smallest step) when nothing is rejected.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("FDR level must lie in (0, 1)")
    p = np.asarray(pvals, dtype=float).ravel()
    m = p.size
    if m == 0:
        return BhResult(np.zeros(0, dtype=bool), float("nan"), 0)
    srt = np.sort(p)
    ok = srt <= q * np.arange(1, m + 1) / m
    if not ok.any():
        return BhResult(np.zeros(m, dtype=bool), q / m, 0)
    r = int(np.flatnonzero(ok)[-1]) + 1
    rejected = p <= srt[r - 1]
    return BhResult(rejected, r * q / m, int(rejected.sum()))
