"""Sliding-window marker-set scans across one or more cohorts.

Each cohort's outcomes are standardized and summarized by FPCA once; the
resulting score matrices are shared by every window test.  Window p-values
are combined across cohorts with Fisher's method and thresholded by
Benjamini-Hochberg.
"""

from __future__ import annotations

import configparser
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    CovariateMatrix,
    GenotypeMatrix,
    LongitudinalDataset,
    dominant_code,
    filter_min_observations,
    impute_missing,
    load_covariates,
    load_genotypes,
    load_long_format,
    qc_filter,
)
from .fpca import FpcaConfig
from .vctest import VcConfig, bh_reject, fisher_combine, fpvc_test_scores, prepare_outcome

logger = logging.getLogger(__name__)


def make_windows(p: int, s: int = 10, stride: int = 1) -> list[range]:
    """Index sets {j, ..., j+s-1} for j = 0, stride, ..., p-s (0-based)."""
    if s < 1 or stride < 1:
        raise ValueError("window size and stride must be >= 1")
    if p < s:
        raise ValueError(f"{p} markers cannot fill a window of {s}")
    return [range(j, j + s) for j in range(0, p - s + 1, stride)]


@dataclass(frozen=True)
class ScanCohort:
    """In-memory inputs for one cohort; genotypes raw (0/1/2, NaN missing)."""

    name: str
    outcomes: tuple
    genotypes: GenotypeMatrix
    covariates: CovariateMatrix | None = None


@dataclass(frozen=True)
class ScanConfig:
    window_size: int = 10
    stride: int = 1
    fdr: float = 0.1
    threads: int = 1
    max_missing_rate: float = 0.05
    min_carriers: int = 5
    min_observations: int = 2
    coding: str = "dominant"
    score_kind: str = "blup"
    nuisance_kind: str | None = None
    fpca: FpcaConfig = field(default_factory=FpcaConfig)
    cohorts: tuple = ()

    def __post_init__(self):
        if self.window_size < 1 or self.stride < 1:
            raise ValueError("window_size and stride must be >= 1")
        if not 0.0 < self.fdr < 1.0:
            raise ValueError("fdr must lie in (0, 1)")
        if self.coding not in ("dominant", "raw"):
            raise ValueError("coding must be 'dominant' or 'raw'")


_SCAN_KEYS = {
    "window_size": int,
    "stride": int,
    "fdr": float,
    "threads": int,
    "max_missing_rate": float,
    "min_carriers": int,
    "min_observations": int,
    "coding": str,
    "score_kind": str,
    "nuisance_kind": str,
}
_FPCA_KEYS = {"fve": float, "grid": int, "h_mean": float, "h_cov": float, "bandwidth_method": str, "binning": str}


def load_scan_config(path) -> ScanConfig:
    """Read an INI scan description.

    A ``[scan]`` section holds scalar settings, an optional ``[fpca]``
    section the FPCA options, and each ``[cohort NAME]`` section lists
    ``outcomes`` (comma separated), ``genotypes``, optional ``marker_map``
    and ``covariates``.  Relative paths resolve against the config file.
    """
    path = Path(path)
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    base = path.parent
    kw = {}
    if cp.has_section("scan"):
        for key, val in cp.items("scan"):
            if key not in _SCAN_KEYS:
                raise ValueError(f"unknown [scan] key {key!r}")
            kw[key] = _SCAN_KEYS[key](val)
    fk = {}
    if cp.has_section("fpca"):
        for key, val in cp.items("fpca"):
            if key not in _FPCA_KEYS:
                raise ValueError(f"unknown [fpca] key {key!r}")
            fk["n_grid" if key == "grid" else key] = _FPCA_KEYS[key](val)
    cohorts = []
    for sec in cp.sections():
        if not sec.startswith("cohort"):
            continue
        name = sec[len("cohort"):].strip() or f"cohort{len(cohorts) + 1}"
        c = cp[sec]
        files = [base / f.strip() for f in c["outcomes"].split(",") if f.strip()]
        outcomes = tuple(load_long_format(f, label=f.stem) for f in files)
        geno = load_genotypes(base / c["genotypes"], base / c["marker_map"] if "marker_map" in c else None)
        covar = load_covariates(base / c["covariates"]) if "covariates" in c else None
        cohorts.append(ScanCohort(name, outcomes, geno, covar))
    if not cohorts:
        raise ValueError("config lists no [cohort ...] sections")
    return ScanConfig(fpca=FpcaConfig(**fk), cohorts=tuple(cohorts), **kw)


@dataclass(frozen=True)
class ScanResultRow:
    window: int
    first_id: str
    mid_id: str
    last_id: str
    chromosome: str
    position: float
    p_cohort: tuple
    p_combined: float | None
    rejected: bool = False
    error: str = ""


@dataclass
class ScanResult:
    rows: list
    n_failed: int
    threshold: float
    n_markers: int
    cohort_subjects: dict


@dataclass(frozen=True)
class _PreparedCohort:
    name: str
    ids: tuple
    scores: tuple
    genotypes: np.ndarray  # imputed, columns in scan marker order
    covariates: np.ndarray


def _prepare_cohort(c: ScanCohort, cfg: ScanConfig):
    """QC, coding, subject intersection and one FPCA per outcome."""
    outs = [filter_min_observations(ds, cfg.min_observations) for ds in c.outcomes]
    g = qc_filter(c.genotypes, cfg.max_missing_rate, cfg.min_carriers)
    sets = [set(ds.ids) for ds in outs] + [set(g.ids)]
    if c.covariates is not None:
        sets.append(set(c.covariates.ids))
    common = set.intersection(*sets)
    ids = [i for i in outs[0].ids if i in common]
    dropped = len(set.union(*sets)) - len(ids)
    if dropped:
        logger.warning("cohort %s: %d subjects not shared by all inputs dropped", c.name, dropped)
    if len(ids) < 3:
        raise ValueError(f"cohort {c.name}: fewer than three usable subjects")
    g = g.subset(ids)
    if cfg.coding == "dominant":
        g = dominant_code(g)
    covar = c.covariates.subset(ids) if c.covariates is not None else CovariateMatrix.intercept_only(ids)
    scores = []
    for ds in outs:
        _, sm = prepare_outcome(ds.subset(ids), cfg.fpca, cfg.score_kind)
        scores.append(np.asarray(sm.scores))
    return g, tuple(ids), tuple(scores), np.asarray(covar.values)


# worker state, set once per process
_STATE: dict = {}


def _init_worker(cohorts, vc):
    _STATE["cohorts"] = cohorts
    _STATE["vc"] = vc


def _test_windows(windows):
    cohorts, vc = _STATE["cohorts"], _STATE["vc"]
    out = []
    for w in windows:
        ps, err = [], ""
        for c in cohorts:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    res = fpvc_test_scores(c.scores, c.genotypes[:, w.start:w.stop], c.covariates, vc)
                ps.append(res.p_value)
            except Exception as exc:  # noqa: BLE001 - recorded per window
                ps.append(None)
                err = err or f"{c.name}: {exc}"
        out.append((tuple(ps), err))
    return out


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def run_scan(cfg: ScanConfig, *, chunk: int = 64) -> ScanResult:
    """Test every window in every cohort and combine.

    Markers are windowed in post-QC order over the markers that pass QC in
    all cohorts.  Failed windows keep their row but are excluded from the
    BH family.
    """
    if not cfg.cohorts:
        raise ValueError("no cohorts to scan")
    prepared = [_prepare_cohort(c, cfg) for c in cfg.cohorts]
    passing = set.intersection(*(set(g.marker_ids) for g, *_ in prepared))
    ref = prepared[0][0]
    keep = [j for j, m in enumerate(ref.marker_ids) if m in passing]
    marker_ids = [ref.marker_ids[j] for j in keep]
    chrom = [ref.chromosomes[j] for j in keep]
    pos = ref.positions[keep]
    cohorts = []
    subjects = {}
    for c, (g, ids, scores, x) in zip(cfg.cohorts, prepared):
        index = {m: j for j, m in enumerate(g.marker_ids)}
        g = impute_missing(g.select_markers([index[m] for m in marker_ids]))
        cohorts.append(_PreparedCohort(c.name, ids, scores, np.asarray(g.values), x))
        subjects[c.name] = len(ids)
    windows = make_windows(len(marker_ids), cfg.window_size, cfg.stride)
    vc = VcConfig(
        score_kind=cfg.score_kind,
        nuisance_kind=cfg.nuisance_kind or ("logistic" if cfg.coding == "dominant" else "binomial"),
    )
    jobs = _chunks(windows, chunk)
    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.threads, initializer=_init_worker, initargs=(cohorts, vc)) as pool:
            parts = list(pool.map(_test_windows, jobs))
    else:
        _init_worker(cohorts, vc)
        parts = [_test_windows(j) for j in jobs]
    outcomes = [o for part in parts for o in part]

    rows = []
    combined = []
    for k, (w, (ps, err)) in enumerate(zip(windows, outcomes)):
        mid = w.start + (len(w) + 1) // 2 - 1
        pc = fisher_combine(ps) if all(p is not None for p in ps) else None
        combined.append(pc)
        rows.append(
            ScanResultRow(
                window=k + 1,
                first_id=marker_ids[w.start],
                mid_id=marker_ids[mid],
                last_id=marker_ids[w.stop - 1],
                chromosome=chrom[mid],
                position=float(pos[mid]),
                p_cohort=ps,
                p_combined=pc,
                error=err,
            )
        )
    ok = [i for i, p in enumerate(combined) if p is not None]
    n_failed = len(rows) - len(ok)
    if n_failed:
        logger.warning("%d of %d windows failed and are excluded from the BH family", n_failed, len(rows))
    bh = bh_reject([combined[i] for i in ok], cfg.fdr)
    for flag, i in zip(bh.rejected, ok):
        if flag:
            r = rows[i]
            rows[i] = ScanResultRow(**{**r.__dict__, "rejected": True})
    return ScanResult(rows, n_failed, bh.threshold, len(marker_ids), subjects)


def _fmt_p(p):
    return "NA" if p is None else repr(float(p))


def write_scan_table(result: ScanResult, path) -> None:
    """Columns: window, first_id, mid_id, last_id, position, p_cohort_1..m, p_combined, rejected."""
    m = len(result.rows[0].p_cohort) if result.rows else 0
    header = ["window", "first_id", "mid_id", "last_id", "position"]
    header += [f"p_cohort_{k}" for k in range(1, m + 1)] + ["p_combined", "rejected"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for r in result.rows:
            fields = [str(r.window), r.first_id, r.mid_id, r.last_id, repr(r.position)]
            fields += [_fmt_p(p) for p in r.p_cohort]
            fields += [_fmt_p(r.p_combined), "1" if r.rejected else "0"]
            fh.write("\t".join(fields) + "\n")


@dataclass(frozen=True)
class ManhattanTable:
    chromosome: tuple
    position: np.ndarray
    neg_log10_p: np.ndarray
    rejected: np.ndarray
    threshold: float  # on the -log10 scale


def emit_manhattan(result: ScanResult, path=None) -> ManhattanTable:
    """Plot data: mid-marker position, -log10 combined p, flag and BH line."""
    rows = [r for r in result.rows if r.p_combined is not None]
    if not rows:
        raise ValueError("no successful windows to plot")
    tiny = np.nextafter(0.0, 1.0)
    nlp = np.array([-math.log10(max(r.p_combined, tiny)) for r in rows])
    table = ManhattanTable(
        chromosome=tuple(r.chromosome for r in rows),
        position=np.array([r.position for r in rows]),
        neg_log10_p=nlp,
        rejected=np.array([r.rejected for r in rows]),
        threshold=-math.log10(result.threshold),
    )
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("chromosome\tposition\tneg_log10_p\trejected\tthreshold\n")
            for c, p, v, f in zip(table.chromosome, table.position, table.neg_log10_p, table.rejected):
                fh.write(f"{c}\t{float(p)!r}\t{float(v)!r}\t{int(f)}\t{float(table.threshold)!r}\n")
    return table
