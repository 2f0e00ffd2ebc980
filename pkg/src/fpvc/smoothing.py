"""Local linear smoothing of the mean function and covariance surface.

Both smoothers use the Epanechnikov kernel (a product kernel in two
dimensions) and are evaluated on an equally spaced grid.  Off-grid values
are obtained by linear (bilinear) interpolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import LongitudinalDataset

logger = logging.getLogger(__name__)

EPAN_ZERO = 0.75
MAX_WIDENINGS = 3
# relative determinant below which a local design counts as degenerate
DEGENERACY_TOL = 1e-10


class DegenerateDesign(ValueError):
    """Raised when a local fit has too few distinct points even after widening."""


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


# ---------------------------------------------------------------------------
# grid and smoothed objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalGrid:
    """Equally spaced evaluation points spanning the time domain."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 1 or p.size < 21:
            raise ValueError("grid needs at least 21 points")
        if not np.all(np.diff(p) > 0):
            raise ValueError("grid must be strictly increasing")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @classmethod
    def over(cls, lo: float, hi: float, m: int = 51) -> "EvalGrid":
        return cls(np.linspace(lo, hi, m))

    @property
    def m(self) -> int:
        return self.points.size

    @property
    def lo(self) -> float:
        return float(self.points[0])

    @property
    def hi(self) -> float:
        return float(self.points[-1])

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.m - 1)

    def locate(self, t):
        """Left cell index and fractional offset of ``t`` (clamped to the grid)."""
        u = (np.asarray(t, dtype=float) - self.lo) / self.spacing
        i = np.clip(np.floor(u).astype(int), 0, self.m - 2)
        f = np.clip(u - i, 0.0, 1.0)
        return i, f

    def interp(self, values, t):
        """Linear interpolation of grid ``values`` (last axis = grid) at ``t``."""
        i, f = self.locate(t)
        v = np.asarray(values)
        return v[..., i] * (1.0 - f) + v[..., i + 1] * f

    def interp2(self, mat, s, t):
        """Bilinear interpolation of a grid x grid matrix at pairs (s, t)."""
        i, fi = self.locate(s)
        j, fj = self.locate(t)
        a = mat[i, j] * (1 - fj) + mat[i, j + 1] * fj
        b = mat[i + 1, j] * (1 - fj) + mat[i + 1, j + 1] * fj
        return a * (1 - fi) + b * fi


@dataclass(frozen=True)
class MeanCurve:
    grid: EvalGrid
    values: np.ndarray
    bandwidth: float

    def __call__(self, t):
        return self.grid.interp(self.values, t)


@dataclass(frozen=True)
class CovSurface:
    grid: EvalGrid
    values: np.ndarray
    bandwidth: float
    sigma2: float = 0.0

    def __call__(self, s, t):
        return self.grid.interp2(self.values, s, t)


@dataclass(frozen=True)
class RawCovariance:
    """Products of within-subject residuals.

    ``s, t, c, subject`` hold the off-diagonal pairs (r != l, both orders);
    ``diag_t, diag_c, diag_subject`` the squared residuals.
    """

    s: np.ndarray
    t: np.ndarray
    c: np.ndarray
    subject: np.ndarray
    diag_t: np.ndarray
    diag_c: np.ndarray
    diag_subject: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.c.size


# ---------------------------------------------------------------------------
# 1-D local linear
# ---------------------------------------------------------------------------


def _canonical_1d(x, y, w):
    order = np.lexsort((w, y, x))
    return x[order], y[order], w[order]


def _ll1d_once(x, y, w, grid_pts, h):
    d = x[None, :] - grid_pts[:, None]
    k = epanechnikov(d / h) * w[None, :]
    kd = k * d
    s0 = k.sum(axis=1)
    s1 = kd.sum(axis=1)
    s2 = (kd * d).sum(axis=1)
    t0 = k @ y
    t1 = kd @ y
    det = s0 * s2 - s1 * s1
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (s0 > 0) & (det > DEGENERACY_TOL * s0 * s0 * h * h)
        fit = np.where(ok, (s2 * t0 - s1 * t1) / det, np.nan)
        lev = np.where(ok, EPAN_ZERO * s2 / det, np.nan)
    return fit, lev, ok


def local_linear_1d(x, y, grid: EvalGrid, h: float, weights=None, *, return_leverage=False):
    """Local linear fit of ``y`` on ``x`` evaluated at the grid points.

    Grid points whose local design is degenerate are refitted with the
    bandwidth doubled, up to three times.

    Returns
    -------
    fit : ndarray
        Intercepts of the local lines.
    leverage : ndarray, only if ``return_leverage``
        Self-influence of a unit-weight observation placed at each grid point.
    """
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    x, y, w = _canonical_1d(x, y, w)
    fit, lev, ok = _ll1d_once(x, y, w, grid.points, h)
    for k in range(1, MAX_WIDENINGS + 1):
        if ok.all():
            break
        f2, l2, ok2 = _ll1d_once(x, y, w, grid.points, h * 2**k)
        fill = ~ok & ok2
        fit[fill], lev[fill] = f2[fill], l2[fill]
        ok = ok | ok2
    if not ok.all():
        bad = grid.points[~ok]
        raise DegenerateDesign(
            f"local linear fit degenerate at {bad.size} grid points (e.g. t={bad[0]:.4g}) with h={h:.4g}"
        )
    return (fit, lev) if return_leverage else fit


# ---------------------------------------------------------------------------
# 2-D local linear
# ---------------------------------------------------------------------------


def _solve_planes(S, T, h):
    """Intercepts and leverages of batched 3x3 symmetric systems via cofactors."""
    a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 0, 2]
    d, e, f = S[..., 1, 1], S[..., 1, 2], S[..., 2, 2]
    c00 = d * f - e * e
    c01 = c * e - b * f
    c02 = b * e - c * d
    det = a * c00 + b * c01 + c * c02
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = (a > 0) & (det > DEGENERACY_TOL * a**3 * h**4)
        fit = np.where(ok, (c00 * T[..., 0] + c01 * T[..., 1] + c02 * T[..., 2]) / det, np.nan)
        lev = np.where(ok, EPAN_ZERO**2 * c00 / det, np.nan)
    return fit, lev, ok


def _assemble(m, moment):
    """Build the 3x3 normal matrices and right-hand sides from ``moment(a, b, resp)``."""
    S = np.empty((m, m, 3, 3))
    S[..., 0, 0] = moment(0, 0, False)
    S[..., 1, 0] = S[..., 0, 1] = moment(1, 0, False)
    S[..., 2, 0] = S[..., 0, 2] = moment(0, 1, False)
    S[..., 1, 1] = moment(2, 0, False)
    S[..., 1, 2] = S[..., 2, 1] = moment(1, 1, False)
    S[..., 2, 2] = moment(0, 2, False)
    T = np.empty((m, m, 3))
    T[..., 0] = moment(0, 0, True)
    T[..., 1] = moment(1, 0, True)
    T[..., 2] = moment(0, 1, True)
    return S, T


def _ll2d_once(s, t, c, w, grid_pts, h):
    ds = s[None, :] - grid_pts[:, None]
    dt = t[None, :] - grid_pts[:, None]
    ks = epanechnikov(ds / h)
    kt = epanechnikov(dt / h) * w[None, :]
    a = [ks, ks * ds, ks * ds * ds]
    b = [kt, kt * dt, kt * dt * dt]
    bc = [bb * c[None, :] for bb in b[:2]]

    def moment(i, j, resp):
        return a[i] @ (bc[j] if resp else b[j]).T

    S, T = _assemble(grid_pts.size, moment)
    return _solve_planes(S, T, h)


def _ll2d_lattice_once(count, total, grid_pts, h):
    d = grid_pts[None, :] - grid_pts[:, None]
    k = epanechnikov(d / h)
    a = [k, k * d, k * d * d]

    def moment(i, j, resp):
        return a[i] @ (total if resp else count) @ a[j].T

    S, T = _assemble(grid_pts.size, moment)
    return _solve_planes(S, T, h)


def _canonical_2d(s, t, c, w):
    order = np.lexsort((w, c, t, s))
    return s[order], t[order], c[order], w[order]


def local_linear_2d(s, t, c, grid: EvalGrid, h: float, weights=None, *, return_leverage=False):
    """Local plane fit of ``c`` on ``(s, t)`` at every grid x grid point.

    Uses a product Epanechnikov kernel with a common bandwidth; degenerate
    grid points are refitted with doubled bandwidth up to three times.  The
    fit is not symmetrized here.
    """
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    c = np.asarray(c, dtype=float)
    w = np.ones_like(c) if weights is None else np.asarray(weights, dtype=float)
    s, t, c, w = _canonical_2d(s, t, c, w)
    fit, lev, ok = _ll2d_once(s, t, c, w, grid.points, h)
    for k in range(1, MAX_WIDENINGS + 1):
        if ok.all():
            break
        f2, l2, ok2 = _ll2d_once(s, t, c, w, grid.points, h * 2**k)
        fill = ~ok & ok2
        fit[fill], lev[fill] = f2[fill], l2[fill]
        ok = ok | ok2
    if not ok.all():
        raise DegenerateDesign(
            f"local plane fit degenerate at {int((~ok).sum())} grid points with h={h:.4g}"
        )
    return (fit, lev) if return_leverage else fit


def bin_pairs(s, t, c, grid: EvalGrid):
    """Collapse points onto the grid lattice (nearest grid point per axis).

    Returns per-cell counts, per-cell response sums and the total sum of
    squared responses, all that a lattice fit and its residual sum of
    squares need.
    """
    i, fi = grid.locate(s)
    j, fj = grid.locate(t)
    ci = np.where(fi >= 0.5, i + 1, i)
    cj = np.where(fj >= 0.5, j + 1, j)
    cell = ci * grid.m + cj
    size = grid.m * grid.m
    count = np.bincount(cell, minlength=size).astype(float).reshape(grid.m, grid.m)
    total = np.bincount(cell, weights=c, minlength=size).reshape(grid.m, grid.m)
    return count, total, float(np.sum(np.asarray(c, dtype=float) ** 2))


def local_linear_lattice(count, total, grid: EvalGrid, h: float, *, return_leverage=False):
    """Local plane fit to lattice-binned data (cell centres at grid points)."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    fit, lev, ok = _ll2d_lattice_once(count, total, grid.points, h)
    for k in range(1, MAX_WIDENINGS + 1):
        if ok.all():
            break
        f2, l2, ok2 = _ll2d_lattice_once(count, total, grid.points, h * 2**k)
        fill = ~ok & ok2
        fit[fill], lev[fill] = f2[fill], l2[fill]
        ok = ok | ok2
    if not ok.all():
        raise DegenerateDesign(
            f"local plane fit degenerate at {int((~ok).sum())} grid points with h={h:.4g}"
        )
    return (fit, lev) if return_leverage else fit


# ---------------------------------------------------------------------------
# operations on datasets
# ---------------------------------------------------------------------------


def default_grid(ds: LongitudinalDataset, m: int = 51) -> EvalGrid:
    lo, hi = ds.domain
    return EvalGrid.over(lo, hi, m)


def local_linear_mean(ds: LongitudinalDataset, h: float, grid: EvalGrid) -> MeanCurve:
    t, y, _ = ds.pooled()
    if t.size < 2:
        raise DegenerateDesign("mean estimation needs at least two observations")
    vals = local_linear_1d(t, y, grid, h)
    vals.setflags(write=False)
    return MeanCurve(grid=grid, values=vals, bandwidth=float(h))


def raw_covariance(ds: LongitudinalDataset, mean: MeanCurve) -> RawCovariance:
    """Within-subject residual products, split into off-diagonal and diagonal."""
    s_parts, t_parts, c_parts, sub_parts = [], [], [], []
    counts = ds.counts
    t_all, y_all, idx_all = ds.pooled()
    resid_all = y_all - mean(t_all)
    for r in np.unique(counts):
        members = np.flatnonzero(counts == r)
        if r < 2:
            continue
        starts = np.concatenate([[0], np.cumsum(counts)])[members]
        rows = starts[:, None] + np.arange(r)[None, :]
        tt = t_all[rows]
        rr = resid_all[rows]
        a, b = np.nonzero(~np.eye(r, dtype=bool))
        s_parts.append(tt[:, a].ravel())
        t_parts.append(tt[:, b].ravel())
        c_parts.append((rr[:, a] * rr[:, b]).ravel())
        sub_parts.append(np.repeat(members, a.size))
    cat = lambda parts, dt=float: np.concatenate(parts).astype(dt) if parts else np.empty(0, dtype=dt)
    return RawCovariance(
        s=cat(s_parts),
        t=cat(t_parts),
        c=cat(c_parts),
        subject=cat(sub_parts, int),
        diag_t=t_all,
        diag_c=resid_all * resid_all,
        diag_subject=idx_all,
    )


BinningMode = Literal["auto", "on", "off"]


def _use_binning(n_pairs: int, grid: EvalGrid, binning: BinningMode) -> bool:
    if binning == "auto":
        return n_pairs > 2 * grid.m * grid.m
    return binning == "on"


def local_linear_surface(
    raw: RawCovariance, h: float, grid: EvalGrid, *, binning: BinningMode = "auto"
) -> CovSurface:
    """Smooth the off-diagonal raw covariances into a symmetric surface.

    With ``binning`` on (or ``"auto"`` and many pairs) the pairs are first
    collapsed onto the evaluation grid lattice, weighted by count.
    """
    if raw.n_pairs == 0:
        raise DegenerateDesign("no within-subject pairs: every subject has one observation")
    if _use_binning(raw.n_pairs, grid, binning):
        count, total, _ = bin_pairs(raw.s, raw.t, raw.c, grid)
        g = local_linear_lattice(count, total, grid, h)
    else:
        g = local_linear_2d(raw.s, raw.t, raw.c, grid, h)
    g = 0.5 * (g + g.T)
    g.setflags(write=False)
    return CovSurface(grid=grid, values=g, bandwidth=float(h))


def estimate_sigma2(raw: RawCovariance, surface: CovSurface, grid: EvalGrid, h: float | None = None) -> float:
    """Measurement error variance from the excess of the diagonal over the surface.

    The squared residuals are smoothed in one dimension; the difference to the
    surface diagonal is averaged over the central half of the domain and
    clamped at zero.
    """
    h = surface.bandwidth if h is None else h
    v = local_linear_1d(raw.diag_t, raw.diag_c, grid, h)
    width = grid.hi - grid.lo
    central = (grid.points >= grid.lo + width / 4) & (grid.points <= grid.hi - width / 4)
    diff = v[central] - np.diag(surface.values)[central]
    return max(float(np.mean(diff)), 0.0)


# ---------------------------------------------------------------------------
# bandwidth selection
# ---------------------------------------------------------------------------


def candidate_bandwidths(ds: LongitudinalDataset, n: int = 10) -> np.ndarray:
    t, _, _ = ds.pooled()
    t = np.sort(t)
    lo_dom, hi_dom = ds.domain
    gap = float(np.mean(np.diff(t))) if t.size > 1 else 0.0
    upper = (hi_dom - lo_dom) / 2.0
    lower = 2.0 * gap
    if not lower > 0 or lower >= upper:
        lower = upper / 100.0
    return np.exp(np.linspace(np.log(lower), np.log(upper), n))


def _gcv(rss: float, trace: float, n: float) -> float:
    if trace >= n:
        return np.inf
    return (rss / n) / (1.0 - trace / n) ** 2


def gcv_mean(ds: LongitudinalDataset, h: float, grid: EvalGrid) -> float:
    t, y, _ = ds.pooled()
    fit, lev = local_linear_1d(t, y, grid, h, return_leverage=True)
    resid = y - grid.interp(fit, t)
    return _gcv(float(resid @ resid), float(np.sum(grid.interp(lev, t))), t.size)


def gcv_surface(raw: RawCovariance, h: float, grid: EvalGrid, binning: BinningMode = "auto") -> float:
    if _use_binning(raw.n_pairs, grid, binning):
        count, total, sumsq = bin_pairs(raw.s, raw.t, raw.c, grid)
        fit, lev = local_linear_lattice(count, total, grid, h, return_leverage=True)
        fit = 0.5 * (fit + fit.T)
        rss = sumsq - 2.0 * float(np.sum(fit * total)) + float(np.sum(count * fit * fit))
        return _gcv(max(rss, 0.0), float(np.sum(count * lev)), float(raw.n_pairs))
    fit, lev = local_linear_2d(raw.s, raw.t, raw.c, grid, h, return_leverage=True)
    fit = 0.5 * (fit + fit.T)
    resid = raw.c - grid.interp2(fit, raw.s, raw.t)
    trace = float(np.sum(grid.interp2(lev, raw.s, raw.t)))
    return _gcv(float(resid @ resid), trace, float(raw.n_pairs))


def _loocv_mean(ds: LongitudinalDataset, h: float, grid: EvalGrid) -> float:
    t, y, idx = ds.pooled()
    total = 0.0
    d = t[None, :] - grid.points[:, None]
    k = epanechnikov(d / h)
    kd = k * d
    mom = np.stack([k, kd, kd * d, k * y, kd * y])  # (5, M, N)
    starts = np.concatenate([[0], np.cumsum(ds.counts)[:-1]])
    per = np.add.reduceat(mom, starts, axis=2)  # (5, M, n)
    tot = mom.sum(axis=2)
    for i in range(ds.n_subjects):
        s0, s1, s2, t0, t1 = tot - per[:, :, i]
        det = s0 * s2 - s1 * s1
        if np.any(~(det > DEGENERACY_TOL * s0 * s0 * h * h)):
            raise DegenerateDesign("leave-one-curve-out fit degenerate")
        fit = (s2 * t0 - s1 * t1) / det
        sl = slice(starts[i], starts[i] + ds.counts[i])
        total += float(np.sum((y[sl] - grid.interp(fit, t[sl])) ** 2))
    return total


def _loocv_surface(raw: RawCovariance, h: float, grid: EvalGrid) -> float:
    order = np.argsort(raw.subject, kind="stable")
    s, t, c, sub = raw.s[order], raw.t[order], raw.c[order], raw.subject[order]
    total = 0.0
    full_S = None
    pts = grid.points
    ds_ = s[None, :] - pts[:, None]
    dt_ = t[None, :] - pts[:, None]
    ks = epanechnikov(ds_ / h)
    kt = epanechnikov(dt_ / h)
    a = [ks, ks * ds_, ks * ds_ * ds_]
    b = [kt, kt * dt_, kt * dt_ * dt_]
    keys = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]

    def moments(sl):
        S = np.stack([a[i][:, sl] @ b[j][:, sl].T for i, j in keys])
        T = np.stack([a[i][:, sl] @ (b[j][:, sl] * c[None, sl]).T for i, j in keys[:3]])
        return S, T

    full_S, full_T = moments(slice(None))
    bounds = np.flatnonzero(np.diff(np.concatenate([[-1], sub, [sub.max() + 1 if sub.size else 0]])))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = slice(lo, hi)
        Si, Ti = moments(sl)
        S = full_S - Si
        T = full_T - Ti
        mat = np.empty(S.shape[1:] + (3, 3))
        mat[..., 0, 0] = S[0]
        mat[..., 0, 1] = mat[..., 1, 0] = S[1]
        mat[..., 0, 2] = mat[..., 2, 0] = S[2]
        mat[..., 1, 1] = S[3]
        mat[..., 1, 2] = mat[..., 2, 1] = S[4]
        mat[..., 2, 2] = S[5]
        det = np.linalg.det(mat)
        if np.any(~(np.abs(det) > 0)):
            raise DegenerateDesign("leave-one-curve-out surface fit degenerate")
        fit = np.linalg.solve(mat, np.moveaxis(T, 0, -1)[..., None])[..., 0, 0]
        fit = 0.5 * (fit + fit.T)
        total += float(np.sum((c[sl] - grid.interp2(fit, s[sl], t[sl])) ** 2))
    return total


def select_bandwidth(
    ds: LongitudinalDataset,
    target: Literal["mean", "surface"],
    grid: EvalGrid,
    *,
    mean: MeanCurve | None = None,
    raw: RawCovariance | None = None,
    method: Literal["gcv", "loocv"] = "gcv",
    binning: BinningMode = "auto",
    n_candidates: int = 10,
) -> float:
    """Choose a bandwidth from a log-spaced candidate grid.

    Candidates span ``[2 * mean gap, |T| / 2]``.  The criterion is GCV by
    default or leave-one-curve-out squared error.  Candidates whose local
    designs stay degenerate are skipped; ties go to the larger bandwidth.
    For ``target="surface"`` either ``raw`` or ``mean`` must be supplied.
    """
    t, _, _ = ds.pooled()
    if t.size < 10:
        raise DegenerateDesign("bandwidth selection needs at least 10 pooled observations")
    if target == "surface" and raw is None:
        if mean is None:
            raise ValueError("surface bandwidth needs the mean curve or raw covariances")
        raw = raw_covariance(ds, mean)
    cands = candidate_bandwidths(ds, n_candidates)
    scores = np.full(cands.size, np.inf)
    # lattice-binned pairs carry no information below the cell size
    min_h = 2.0 * grid.spacing if target == "surface" and _use_binning(raw.n_pairs, grid, binning) else 0.0
    # largest first: once a bandwidth is degenerate every smaller one is too
    for i in range(cands.size - 1, -1, -1):
        h = cands[i]
        if h < min_h:
            break
        try:
            if target == "mean":
                scores[i] = gcv_mean(ds, h, grid) if method == "gcv" else _loocv_mean(ds, h, grid)
            elif target == "surface":
                scores[i] = (
                    gcv_surface(raw, h, grid, binning) if method == "gcv" else _loocv_surface(raw, h, grid)
                )
            else:
                raise ValueError(f"unknown target {target!r}")
        except DegenerateDesign:
            break
    if not np.isfinite(scores).any():
        raise DegenerateDesign(f"every candidate bandwidth is degenerate for the {target}")
    if target == "mean":
        scale = float(np.mean(ds.pooled()[1] ** 2))
    else:
        scale = float(np.mean(raw.c**2)) if raw.n_pairs else 0.0
    # criteria at round-off level (exact fits) are ties
    scores = np.maximum(scores, 1e-20 * max(scale, np.finfo(float).tiny))
    best = np.min(scores)
    winners = np.flatnonzero(scores <= best * (1.0 + 1e-10))
    h = float(cands[winners[-1]])
    logger.debug("selected %s bandwidth %.4g (criterion %.4g)", target, h, best)
    return h
