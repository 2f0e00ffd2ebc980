"""Simulation design, comparator score models and rejection-rate experiments.

Each replicate draws two outcomes sharing observation times and a random
intercept, and one biallelic marker z ~ Binomial(2, maf).  All methods in a
replicate see the same data, so power differences are paired.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline

from .data import LongitudinalDataset, standardize_outcome
from .fpca import FpcaConfig
from .scores import ConvergenceError, ScoreMatrix, fit_mixed_model
from .vctest import VcConfig, fpvc_test_scores, prepare_outcome

logger = logging.getLogger(__name__)

DOMAIN = (0.0, 2.0 * math.pi)
METHODS = ("fpvc", "refit", "linear", "bspline", "poly")
DF_GRID = (2, 3, 4, 5, 6)
SD_RANDOM = 0.5  # N(0, 0.25)
SD_NOISE = 0.5


@dataclass(frozen=True)
class SimConfig:
    """One cell of the simulation design plus run settings."""

    n: int = 200
    lambda_pois: float = 6.0
    alpha: float = 0.0
    gamma: float = 1.0
    beta: float = 0.0
    maf: float = 0.1
    n_reps: int = 1000
    seed: int = 1
    level: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.gamma <= 1.0):
            raise ValueError("alpha and gamma must lie in [0, 1]")
        if self.n < 3 or self.n_reps < 1 or self.lambda_pois < 0:
            raise ValueError("invalid simulation size")
        if not 0.0 < self.maf < 1.0 or not 0.0 < self.level < 1.0:
            raise ValueError("maf and level must lie in (0, 1)")

    @property
    def cell(self) -> tuple:
        return (self.alpha, self.gamma, self.beta, self.n)


@dataclass(frozen=True)
class SimCohort:
    outcomes: tuple
    z: np.ndarray
    truth: dict = field(default_factory=dict)


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    """Independent stream for replicate ``r`` derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(r)]))


def mean_function(t, m: int, gamma: float):
    return np.sin(t) + (-1) ** (m - 1) * gamma * (np.sin(t / 3.0) + np.cos(t))


def genetic_effect(t, alpha: float):
    return alpha * (np.cos(t) + np.cos(t / 10.0) - np.sin(3.0 * t)) + (1.0 - alpha) * t / 7.0


def simulate_cohort(cfg: SimConfig, rng: np.random.Generator | None = None) -> SimCohort:
    """Draw one cohort from the two-outcome design."""
    rng = rng if rng is not None else replicate_rng(cfg.seed, 0)
    n = cfg.n
    r = rng.poisson(cfg.lambda_pois, n) + 2
    z = rng.binomial(2, cfg.maf, n).astype(float)
    b0 = rng.normal(0.0, SD_RANDOM, n)
    b1 = rng.normal(0.0, SD_RANDOM, (2, n))
    times = [np.sort(rng.uniform(*DOMAIN, k)) for k in r]
    ids = tuple(f"s{i:05d}" for i in range(n))
    outcomes = []
    for m in (1, 2):
        vals = []
        for i, t in enumerate(times):
            y = (
                mean_function(t, m, cfg.gamma)
                + (1.0 - cfg.gamma) * (b0[i] + 0.5 * b1[m - 1, i] * np.cos(t / 4.0))
                + cfg.beta * z[i] * genetic_effect(t, cfg.alpha)
                + rng.normal(0.0, SD_NOISE, t.size)
            )
            vals.append(y)
        outcomes.append(LongitudinalDataset(ids, tuple(times), tuple(vals), label=f"y{m}", domain=DOMAIN))
    truth = {"b0": b0, "b1": b1, "r": r}
    return SimCohort(tuple(outcomes), z, truth)


def simulate_scan_cohort(
    n: int,
    n_markers: int,
    planted: range,
    beta: float,
    *,
    maf: float = 0.2,
    gamma: float = 0.5,
    missing_rate: float = 0.01,
    lambda_pois: float = 6.0,
    rng: np.random.Generator,
    name: str = "cohort",
):
    """Cohort for a synthetic scan: only markers in ``planted`` affect the outcomes.

    The outcomes follow the two-outcome design with the genetic term
    driven by the planted markers' allele count; a small fraction of
    genotypes is set missing.
    """
    from .data import GenotypeMatrix
    from .scan import ScanCohort

    cfg = SimConfig(n=n, lambda_pois=lambda_pois, gamma=gamma, beta=0.0, maf=maf, n_reps=1)
    G = rng.binomial(2, maf, (n, n_markers)).astype(float)
    burden = G[:, planted.start:planted.stop].sum(axis=1)
    base = simulate_cohort(cfg, rng)
    outcomes = []
    for ds in base.outcomes:
        vals = tuple(y + beta * burden[i] * genetic_effect(t, 0.0) for i, (t, y) in enumerate(zip(ds.times, ds.values)))
        outcomes.append(LongitudinalDataset(ds.ids, ds.times, vals, label=ds.label, domain=ds.domain))
    G[rng.random(G.shape) < missing_rate] = np.nan
    geno = GenotypeMatrix(
        ids=outcomes[0].ids,
        marker_ids=tuple(f"m{j:05d}" for j in range(n_markers)),
        values=G,
        chromosomes=("1",) * n_markers,
        positions=np.arange(1, n_markers + 1) * 1000.0,
    )
    return ScanCohort(name, tuple(outcomes), geno)


# ---------------------------------------------------------------------------
# comparator score models
# ---------------------------------------------------------------------------


def scaled_time(t):
    """Affine map of the design interval onto (-1, 1)."""
    return (np.asarray(t, dtype=float) - math.pi) / math.pi


def polynomial_basis(t, df: int) -> np.ndarray:
    tt = scaled_time(t)
    return np.vander(tt, df, increasing=True)


def bspline_basis(t, df: int, knots_from=None) -> np.ndarray:
    """B-spline basis with ``df`` functions summing to one.

    Cubic when ``df >= 4`` with ``df - 4`` interior knots at quantiles of
    ``knots_from`` (default ``t``); lower degree ``df - 1`` otherwise.
    Boundary knots sit at the range of ``knots_from``.
    """
    t = np.asarray(t, dtype=float)
    ref = t if knots_from is None else np.asarray(knots_from, dtype=float)
    if df < 1:
        raise ValueError("need at least one basis function")
    k = min(3, df - 1)
    lo, hi = float(ref.min()), float(ref.max())
    n_int = df - k - 1
    interior = np.quantile(ref, np.arange(1, n_int + 1) / (n_int + 1)) if n_int > 0 else np.empty(0)
    knots = np.concatenate([[lo] * (k + 1), interior, [hi] * (k + 1)])
    x = np.clip(t, lo, hi)
    return BSpline.design_matrix(x, knots, k).toarray()


@dataclass(frozen=True)
class BasisFit:
    scores: ScoreMatrix
    df: int
    aic: float


def _basis_scores(ds: LongitudinalDataset, B: np.ndarray, kind: str, **em) -> BasisFit:
    t, y, _ = ds.pooled()
    fit = fit_mixed_model(y, B, ds.counts, X=B, diagonal=True, **em)
    df = B.shape[1]
    aic = -2.0 * fit.ml_loglik + 2.0 * (df + 1 + df)
    return BasisFit(ScoreMatrix(ds.ids, fit.blups, kind, ds.label), df, aic)


def linear_comparator_scores(ds: LongitudinalDataset) -> ScoreMatrix:
    """BLUPs of a random intercept and slope in scaled time."""
    t, _, _ = ds.pooled()
    return _basis_scores(ds, polynomial_basis(t, 2), "linear").scores


def basis_comparator_scores(ds: LongitudinalDataset, basis: str = "polynomial", df_grid=DF_GRID) -> BasisFit:
    """Fit mixed models over ``df_grid`` and keep the lowest-AIC one."""
    t, _, _ = ds.pooled()
    best = None
    errors = []
    for df in df_grid:
        if basis in ("polynomial", "poly"):
            B = polynomial_basis(t, df)
        elif basis == "bspline":
            B = bspline_basis(t, df)
        else:
            raise ValueError(f"unknown basis {basis!r}")
        try:
            fit = _basis_scores(ds, B, basis)
        except (ConvergenceError, np.linalg.LinAlgError, ValueError) as exc:
            errors.append(f"df={df}: {exc}")
            continue
        if best is None or fit.aic < best.aic:
            best = fit
    if best is None:
        raise ConvergenceError("all basis fits failed: " + "; ".join(errors))
    return best


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def method_scores(method: str, datasets, fpca_config: FpcaConfig | None = None, cache=None):
    """Score matrices (one per outcome) for a method on standardized data."""
    out = []
    for ds in datasets:
        if method in ("fpvc", "refit"):
            kind = "blup" if method == "fpvc" else "refit"
            out.append(prepare_outcome(ds, fpca_config, kind)[1])
        elif method == "linear":
            out.append(linear_comparator_scores(standardize_outcome(ds)[0]))
        elif method in ("poly", "bspline"):
            basis = "polynomial" if method == "poly" else "bspline"
            out.append(basis_comparator_scores(standardize_outcome(ds)[0], basis).scores)
        else:
            raise ValueError(f"unknown method {method!r}")
    return out


def replicate_pvalues(cfg: SimConfig, r: int, methods=METHODS, fpca_config: FpcaConfig | None = None) -> dict:
    """p-value per method for replicate ``r`` (NaN when the method fails)."""
    cohort = simulate_cohort(cfg, replicate_rng(cfg.seed, r))
    x = np.ones((cfg.n, 1))
    vc = VcConfig(nuisance_kind="binomial")
    out = {}
    for method in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                scores = method_scores(method, cohort.outcomes, fpca_config)
                out[method] = fpvc_test_scores(scores, cohort.z, x, vc).p_value
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
            logger.debug("replicate %d method %s failed: %s", r, method, exc)
            out[method] = float("nan")
    return out


def _run_chunk(args):
    cfg, reps, methods, fpca_config = args
    return [replicate_pvalues(cfg, r, methods, fpca_config) for r in reps]


@dataclass(frozen=True)
class MethodRate:
    rate: float
    se: float
    n_ok: int
    n_failed: int


@dataclass
class ExperimentResult:
    """Rejection rates per (cell, method) plus the raw replicate p-values."""

    level: float
    rates: dict = field(default_factory=dict)
    pvalues: dict = field(default_factory=dict)

    def rows(self):
        for (cell, method), mr in sorted(self.rates.items(), key=lambda kv: (kv[0][0], METHODS.index(kv[0][1]) if kv[0][1] in METHODS else 99)):
            alpha, gamma, beta, n = cell
            yield dict(alpha=alpha, gamma=gamma, beta=beta, n=n, method=method, **asdict(mr))


def rejection_rate(pvals, level: float) -> MethodRate:
    p = np.asarray(pvals, dtype=float)
    ok = np.isfinite(p)
    n_ok = int(ok.sum())
    if n_ok == 0:
        return MethodRate(float("nan"), float("nan"), 0, int(p.size))
    rate = float(np.mean(p[ok] < level))
    return MethodRate(rate, math.sqrt(rate * (1.0 - rate) / n_ok), n_ok, int(p.size - n_ok))


def run_experiment(
    cells,
    methods=METHODS,
    *,
    fpca_config: FpcaConfig | None = None,
    workers: int = 1,
    chunk: int = 25,
) -> ExperimentResult:
    """Simulate ``n_reps`` cohorts per cell and record rejection rates.

    Replicate ``r`` of every cell draws from ``SeedSequence([seed, r])`` so
    results do not depend on ``workers``.
    """
    if isinstance(cells, SimConfig):
        cells = [cells]
    cells = list(cells)
    if not cells:
        raise ValueError("empty design")
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    levels = {c.level for c in cells}
    if len(levels) != 1:
        raise ValueError("all cells must share one test level")
    result = ExperimentResult(level=levels.pop())
    workers = max(1, int(workers or os.cpu_count() or 1))
    for cfg in cells:
        jobs = [(cfg, range(a, min(a + chunk, cfg.n_reps)), methods, fpca_config) for a in range(0, cfg.n_reps, chunk)]
        if workers == 1:
            parts = map(_run_chunk, jobs)
        else:
            pool = ProcessPoolExecutor(max_workers=workers)
            parts = pool.map(_run_chunk, jobs)
        reps = [rp for part in parts for rp in part]
        if workers != 1:
            pool.shutdown()
        for m in methods:
            p = np.array([rp[m] for rp in reps])
            result.pvalues[(cfg.cell, m)] = p
            mr = rejection_rate(p, cfg.level)
            if mr.n_failed:
                warnings.warn(f"{mr.n_failed} replicates failed for {m} in cell {cfg.cell}", RuntimeWarning, stacklevel=2)
            result.rates[(cfg.cell, m)] = mr
    return result


def with_reps(cfg: SimConfig, n_reps: int, seed: int | None = None) -> SimConfig:
    return replace(cfg, n_reps=n_reps, seed=cfg.seed if seed is None else seed)
