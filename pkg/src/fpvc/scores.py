"""Subject-level FPC scores: conditional-expectation (BLUP) and re-fitted.

The re-fitted scores come from a linear mixed model with the estimated
eigenfunctions as random-effect design.  :func:`fit_mixed_model` is a
general REML EM fitter for ``y_i = X_i beta + Z_i b_i + e_i`` that works on
per-subject cross-products only, so every E-step is a batch of K x K
operations regardless of how many observations a subject has.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset
from .fpca import FpcaModel

logger = logging.getLogger(__name__)

RIDGE_COND = 1e12
RIDGE_SCALE = 1e-8
D_FLOOR = 1e-10


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class ScoreMatrix:
    ids: tuple
    scores: np.ndarray
    kind: str
    label: str = "outcome"

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 2 or s.shape[0] != len(self.ids):
            raise ValueError("score matrix rows must match subject ids")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite scores")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "ids", tuple(self.ids))

    @property
    def k(self) -> int:
        return self.scores.shape[1]

    def subset(self, ids) -> "ScoreMatrix":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        rows = [pos[s] for s in ids]
        return ScoreMatrix(tuple(ids), self.scores[rows], self.kind, self.label)


@dataclass(frozen=True)
class RefitCovariance:
    D: np.ndarray
    sigma2_refit: float
    reml_loglik: float
    n_iter: int = 0


# ---------------------------------------------------------------------------
# BLUP scores
# ---------------------------------------------------------------------------


def _blocks(ds: LongitudinalDataset):
    """Yield (subject indices, times, values) for subjects grouped by r_i."""
    counts = ds.counts
    t_all, y_all, _ = ds.pooled()
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    for r in np.unique(counts):
        members = np.flatnonzero(counts == r)
        rows = starts[members][:, None] + np.arange(r)[None, :]
        yield members, t_all[rows], y_all[rows]


def subject_covariance(model: FpcaModel, times: np.ndarray) -> np.ndarray:
    """Sigma_y for a batch of subjects with equal r; ``times`` is (b, r).

    Built from the K retained components, sum_k lambda_k phi_k phi_k' +
    sigma2 I, rather than the raw smoothed surface: the surface is generally
    indefinite, and its negative directions make Sigma_y singular or
    indefinite for some subjects.
    """
    r = times.shape[1]
    phi = model.phi(times.reshape(-1)).reshape(model.k, *times.shape)  # (K, b, r)
    cov = np.einsum("kbr,k,kbs->brs", phi, model.eigenvalues, phi)
    return cov + model.sigma2 * np.eye(r)[None]


def _ridge(cov: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(cov)
    bad = ~(cond <= RIDGE_COND)
    if bad.any():
        r = cov.shape[-1]
        tr = np.trace(cov, axis1=1, axis2=2)
        bump = RIDGE_SCALE * np.maximum(np.abs(tr), np.finfo(float).tiny) / r
        cov = cov.copy()
        cov[bad] += bump[bad, None, None] * np.eye(r)[None]
        logger.debug("ridge added to %d ill-conditioned subject covariances", int(bad.sum()))
    return cov


def blup_scores(model: FpcaModel, ds: LongitudinalDataset) -> ScoreMatrix:
    """Conditional-expectation scores lambda_k phi_ik' Sigma_i^{-1} (y_i - mu_i)."""
    out = np.empty((ds.n_subjects, model.k))
    for members, tt, yy in _blocks(ds):
        cov = _ridge(subject_covariance(model, tt))
        resid = yy - model.mu(tt)
        sol = np.linalg.solve(cov, resid[..., None])[..., 0]
        phi = model.phi(tt)  # (K, b, r)
        out[members] = np.einsum("kbr,br->bk", phi, sol) * model.eigenvalues[None, :]
    return ScoreMatrix(ds.ids, out, "blup", ds.label)


# ---------------------------------------------------------------------------
# REML EM for linear mixed models
# ---------------------------------------------------------------------------


@dataclass
class MixedModelFit:
    """Result of :func:`fit_mixed_model`.

    ``loglik`` is the restricted log-likelihood (equal to the ordinary one
    when there are no fixed effects); ``ml_loglik`` is the ordinary Gaussian
    log-likelihood at the final estimates.
    """

    beta: np.ndarray
    D: np.ndarray
    sigma2: float
    blups: np.ndarray
    loglik: float
    ml_loglik: float
    n_iter: int
    trace: list = field(default_factory=list)

    @property
    def n_variance_params(self) -> int:
        return int(np.count_nonzero(np.triu(np.ones_like(self.D)) * (self.D != 0))) + 1


def _segment_sums(arr, starts):
    return np.add.reduceat(arr, starts, axis=0)


class _CrossProducts:
    """Per-subject sufficient statistics of (y, X, Z)."""

    def __init__(self, y, X, Z, counts):
        counts = np.asarray(counts, dtype=int)
        if np.any(counts < 1):
            raise ValueError("every subject needs at least one observation")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.n = counts.size
        self.N = int(counts.sum())
        self.r = counts.astype(float)
        self.p = 0 if X is None else X.shape[1]
        self.K = Z.shape[1]
        seg = lambda a: _segment_sums(a, starts)
        self.ZZ = seg(Z[:, :, None] * Z[:, None, :])
        self.Zy = seg(Z * y[:, None])
        self.yy = seg(y * y)
        if self.p:
            self.XX = seg(X[:, :, None] * X[:, None, :])
            self.XZ = seg(X[:, :, None] * Z[:, None, :])
            self.Xy = seg(X * y[:, None])


def _e_step(cp: _CrossProducts, D: np.ndarray, s2: float):
    """Posterior moments of the random effects and the restricted log-likelihood."""
    n, K, p = cp.n, cp.K, cp.p
    eyeK = np.eye(K)
    M = s2 * eyeK[None] + cp.ZZ @ D[None]  # sigma2 I + Z'Z D
    Minv = np.linalg.inv(M)
    DMinv = D[None] @ Minv  # D M^{-1}; b_hat = D M^{-1} Z'r
    sign, logdetM = np.linalg.slogdet(M)
    if np.any(sign <= 0):
        raise ConvergenceError("non-positive definite marginal covariance")
    logdetV = (cp.r - K) * np.log(s2) + logdetM
    if p:
        # X'V^{-1}A = (X'A - X'Z D M^{-1} Z'A) / sigma2
        XZDM = cp.XZ @ DMinv
        XVX = (cp.XX - XZDM @ np.swapaxes(cp.XZ, 1, 2)) / s2
        XVy = (cp.Xy - np.einsum("nij,nj->ni", XZDM, cp.Zy)) / s2
        W = XVX.sum(axis=0)
        Winv = np.linalg.inv(W)
        beta = Winv @ XVy.sum(axis=0)
        Zr = cp.Zy - np.einsum("nkj,j->nk", np.swapaxes(cp.XZ, 1, 2), beta)
        rr = cp.yy - 2.0 * cp.Xy @ beta + np.einsum("i,nij,j->n", beta, cp.XX, beta)
        logdetW = np.linalg.slogdet(W)[1]
    else:
        beta = np.empty(0)
        Zr = cp.Zy
        rr = cp.yy
        logdetW = 0.0
    b = np.einsum("nij,nj->ni", DMinv, Zr)
    rVr = (rr - np.einsum("nk,nk->n", Zr, b)) / s2
    # Var(b_i | y) = D - D M^{-1} Z'Z D (+ REML correction)
    Vb = D[None] - DMinv @ cp.ZZ @ D[None]
    # tr Var(e_i | y) = r sigma2 - sigma4 tr(P_ii)
    trVinv = (cp.r - np.einsum("nij,nji->n", DMinv, cp.ZZ)) / s2
    tr_corr = 0.0
    if p:
        ZVX = Minv @ np.swapaxes(cp.XZ, 1, 2)  # Z'V^{-1}X = M^{-1} Z'X
        DZVX = D[None] @ ZVX
        Vb = Vb + DZVX @ Winv[None] @ np.swapaxes(DZVX, 1, 2)
        # X'V^{-2}X = (X - Z C)'(X - Z C) / sigma4, C = D M^{-1} Z'X
        C = DZVX
        XZC = np.swapaxes(cp.XZ, 1, 2)
        XV2X = (
            cp.XX
            - cp.XZ @ C
            - np.swapaxes(C, 1, 2) @ XZC
            + np.swapaxes(C, 1, 2) @ cp.ZZ @ C
        ) / s2**2
        tr_corr = np.einsum("ij,nji->n", Winv, XV2X)
    trP = trVinv - tr_corr
    resid_ss = rr - 2.0 * np.einsum("nk,nk->n", b, Zr) + np.einsum("nk,nkl,nl->n", b, cp.ZZ, b)
    e_ee = resid_ss + s2 * cp.r - s2**2 * trP
    N, n_fixed = cp.N, p
    reml = -0.5 * (np.sum(logdetV) + logdetW + np.sum(rVr) + (N - n_fixed) * np.log(2 * np.pi))
    ml = -0.5 * (np.sum(logdetV) + np.sum(rVr) + N * np.log(2 * np.pi))
    return beta, b, Vb, e_ee, reml, ml


def _clamp_psd(D: np.ndarray, floor: float = D_FLOOR) -> np.ndarray:
    D = 0.5 * (D + D.T)
    w, v = np.linalg.eigh(D)
    if w.min() >= floor:
        return D
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def fit_mixed_model(
    y,
    Z,
    counts,
    X=None,
    *,
    diagonal: bool = False,
    D0=None,
    sigma2_0: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    check_monotone: bool = False,
    accelerate: bool = True,
) -> MixedModelFit:
    """REML estimates of ``D`` and ``sigma2`` by EM, plus per-subject BLUPs.

    Parameters
    ----------
    y : (N,) array
        Stacked responses, subjects contiguous.
    Z : (N, K) array
        Random-effect design rows.
    counts : (n,) int array
        Observations per subject.
    X : (N, p) array, optional
        Fixed-effect design.  Without it the fit is plain maximum likelihood.
    diagonal : bool
        Constrain ``D`` to be diagonal.
    check_monotone : bool
        Raise if the restricted log-likelihood ever decreases by more than
        1e-10 (relative) between iterations.
    accelerate : bool
        Use SQUAREM extrapolation between EM steps, keeping an extrapolated
        point only when it does not lower the restricted log-likelihood.
        ``max_iter`` counts E-steps either way.

    Raises
    ------
    ConvergenceError
        If the relative log-likelihood change stays above ``tol`` for
        ``max_iter`` iterations.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    X = None if X is None else np.asarray(X, dtype=float)
    cp = _CrossProducts(y, X, Z, counts)
    K = cp.K
    if cp.n < K + 2 and X is None:
        raise ValueError("need at least K + 2 subjects")
    s2 = float(sigma2_0) if sigma2_0 and sigma2_0 > 0 else max(float(np.var(y)) / 2.0, 1e-6)
    D = np.eye(K) * max(float(np.var(y)) / max(K, 1), 1e-6) if D0 is None else np.array(D0, dtype=float)
    D = _clamp_psd(np.diag(np.diag(D)) if diagonal else D)
    return _run_em(cp, D, s2, diagonal, tol, max_iter, check_monotone, accelerate)


def _m_step(cp: _CrossProducts, b, Vb, e_ee, diagonal: bool):
    if cp.p == 0:
        return _px_m_step(cp, b, Vb, diagonal)
    D = (np.einsum("nk,nl->kl", b, b) + Vb.sum(axis=0)) / cp.n
    if diagonal:
        D = np.diag(np.diag(D))
    return _clamp_psd(D), max(float(np.sum(e_ee)) / cp.N, 1e-12)


def _px_m_step(cp: _CrossProducts, b, Vb, diagonal: bool):
    """Parameter-expanded M-step for models without fixed effects.

    The expanded model y_i = Z_i L b_i + e_i adds a working K x K matrix L
    fitted by expected least squares; folding it back, D = L D* L', keeps
    the ascent property while moving small variance components much faster.
    """
    K = cp.K
    S = b[:, :, None] * b[:, None, :] + Vb  # E[b b' | y] per subject
    Dstar = S.mean(axis=0)
    C = np.einsum("nk,nl->kl", cp.Zy, b)  # sum Z'y b'
    try:
        if diagonal:
            lam = np.linalg.solve(np.einsum("nkl,nlk->kl", cp.ZZ, S), np.diag(C))
            L = np.diag(lam)
        else:
            M = np.einsum("nab,ncd->acbd", S, cp.ZZ).reshape(K * K, K * K)
            L = np.linalg.solve(M, C.ravel(order="F")).reshape(K, K, order="F")
    except np.linalg.LinAlgError:
        L = np.eye(K)
    rss = cp.yy.sum() - 2.0 * np.sum(L * C) + np.einsum("ab,nac,cd,nbd->", L, cp.ZZ, L, S)
    D = L @ Dstar @ L.T
    if diagonal:
        D = np.diag(np.diag(D))
    return _clamp_psd(D), max(float(rss) / cp.N, 1e-12)


def _run_em(cp, D, s2, diagonal, tol, max_iter, check_monotone, accelerate):
    """EM iterations, optionally with safeguarded SQUAREM extrapolation.

    Every recorded log-likelihood belongs to an accepted iterate; an
    extrapolated point is accepted only if it does not lower the restricted
    log-likelihood, so the trace is monotone either way.
    """
    K = cp.K
    trace: list[float] = []

    # extrapolate on log sigma2 and the matrix log of D, which keeps the
    # candidate positive definite and lets it approach the boundary geometrically
    def pack(D, s2):
        w, V = np.linalg.eigh(D)
        logD = (V * np.log(np.maximum(w, D_FLOOR))) @ V.T
        return np.concatenate([[np.log(s2)], logD.ravel()])

    def unpack(v):
        L = v[1:].reshape(K, K)
        L = 0.5 * (L + L.T)
        w, V = np.linalg.eigh(L)
        D = (V * np.exp(np.clip(w, -700.0, 700.0))) @ V.T
        if diagonal:
            D = np.diag(np.diag(D))
        return _clamp_psd(D), max(float(np.exp(min(v[0], 700.0))), 1e-12)

    def evaluate(D, s2):
        beta, b, Vb, e_ee, reml, ml = _e_step(cp, D, s2)
        nxt = _m_step(cp, b, Vb, e_ee, diagonal)
        return (beta, D, s2, b, reml, ml), nxt

    def record(cur):
        """Append an accepted iterate; return True when converged."""
        reml = cur[4]
        if trace:
            prev = trace[-1]
            if check_monotone and reml < prev - 1e-10 * abs(prev):
                trace.append(reml)
                raise ConvergenceError(f"restricted log-likelihood decreased at iteration {len(trace)}", trace)
            trace.append(reml)
            return abs(reml - prev) <= tol * abs(prev)
        trace.append(reml)
        return False

    def done(cur):
        beta, D, s2, b, reml, ml = cur
        return MixedModelFit(beta, D, s2, b, reml, ml, n_eval, trace)

    n_eval = 1
    cur, nxt = evaluate(D, s2)
    if record(cur):
        return done(cur)
    while n_eval < max_iter:
        th0 = pack(cur[1], cur[2])
        c1, n1 = evaluate(*nxt)
        n_eval += 1
        if record(c1):
            return done(c1)
        if not accelerate or n_eval >= max_iter:
            cur, nxt = c1, n1
            continue
        th1 = pack(c1[1], c1[2])
        th2 = pack(*n1)
        r = th1 - th0
        v = th2 - th1 - r
        nv = np.linalg.norm(v)
        step = -np.linalg.norm(r) / nv if nv > 0 else -1.0
        step = min(step, -1.0)
        accepted = False
        if step < -1.0:
            try:
                ce, ne = evaluate(*unpack(th0 - 2.0 * step * r + step * step * v))
                n_eval += 1
                if np.isfinite(ce[4]) and ce[4] >= c1[4]:
                    accepted = True
                    if record(ce):
                        return done(ce)
                    cur, nxt = ce, ne
            except (ConvergenceError, np.linalg.LinAlgError):
                pass
        if not accepted:
            cur, nxt = c1, n1
    raise ConvergenceError(f"EM did not converge in {max_iter} iterations", trace)


def refit_scores(model: FpcaModel, ds: LongitudinalDataset, **em_options) -> tuple[ScoreMatrix, RefitCovariance]:
    """Scores from a mixed model with the estimated eigenfunctions as basis.

    The mean curve is held fixed; the score covariance ``D`` is unstructured
    and estimated with the residual variance by EM.
    """
    if ds.n_subjects < model.k + 2:
        raise ValueError("re-fitting needs at least K + 2 subjects")
    t, y, _ = ds.pooled()
    resid = y - model.mu(t)
    Z = model.phi(t).T
    D0 = np.diag(np.maximum(model.eigenvalues, 1e-6))
    s2_0 = model.sigma2 if model.sigma2 > 0 else None
    fit = fit_mixed_model(resid, Z, ds.counts, D0=D0, sigma2_0=s2_0, **em_options)
    cov = RefitCovariance(D=fit.D, sigma2_refit=fit.sigma2, reml_loglik=fit.loglik, n_iter=fit.n_iter)
    return ScoreMatrix(ds.ids, fit.blups, "refit", ds.label), cov


score_counter = {"compute_scores": 0}


def compute_scores(model: FpcaModel, ds: LongitudinalDataset, kind: str = "blup") -> ScoreMatrix:
    score_counter["compute_scores"] += 1
    if kind == "blup":
        return blup_scores(model, ds)
    if kind == "refit":
        return refit_scores(model, ds)[0]
    raise ValueError(f"unknown score kind {kind!r}")
