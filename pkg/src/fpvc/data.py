"""Longitudinal outcomes, covariates and genotypes: containers and ingestion.

All containers are frozen dataclasses whose arrays are marked read-only, so
they can be shared between worker processes without copying concerns.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Mapping, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

Source = Union[str, os.PathLike, IO[str], IO[bytes], bytes]

MISSING_TOKENS = frozenset({"NA", "na", "NaN", "nan", ""})


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LongitudinalDataset:
    """Irregularly sampled observations of one outcome for a set of subjects.

    Parameters
    ----------
    ids : tuple of str
        Subject identifiers, unique.
    times, values : tuple of ndarray
        Per-subject observation times (sorted ascending) and outcome values.
    label : str
        Outcome name.
    domain : (float, float), optional
        Closed interval containing every time. Defaults to the observed range.
    """

    ids: tuple
    times: tuple
    values: tuple
    label: str = "outcome"
    domain: tuple | None = None

    def __post_init__(self):
        if len(self.ids) != len(self.times) or len(self.ids) != len(self.values):
            raise DataError("ids, times and values must have the same length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("subject ids must be unique")
        times, values = [], []
        for sid, t, y in zip(self.ids, self.times, self.values):
            t = np.asarray(t, dtype=float)
            y = np.asarray(y, dtype=float)
            if t.ndim != 1 or t.shape != y.shape:
                raise DataError(f"subject {sid}: times and values differ in length")
            if t.size == 0:
                raise DataError(f"subject {sid}: no observations")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
                raise DataError(f"subject {sid}: non-finite time or value")
            order = np.lexsort((y, t))
            times.append(_frozen(t[order]))
            values.append(_frozen(y[order]))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "times", tuple(times))
        object.__setattr__(self, "values", tuple(values))
        lo = min(float(t[0]) for t in times) if times else 0.0
        hi = max(float(t[-1]) for t in times) if times else 0.0
        if self.domain is None:
            object.__setattr__(self, "domain", (lo, hi))
        else:
            a, b = (float(self.domain[0]), float(self.domain[1]))
            if not a < b:
                raise DataError("domain must satisfy t_min < t_max")
            if times and (lo < a or hi > b):
                raise DataError(f"observation times outside declared domain [{a}, {b}]")
            object.__setattr__(self, "domain", (a, b))

    @property
    def n_subjects(self) -> int:
        return len(self.ids)

    @property
    def counts(self) -> np.ndarray:
        """Number of observations r_i per subject."""
        return np.array([t.size for t in self.times], dtype=int)

    def pooled(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated (times, values, subject index) over all subjects."""
        if not self.times:
            return np.empty(0), np.empty(0), np.empty(0, dtype=int)
        t = np.concatenate(self.times)
        y = np.concatenate(self.values)
        idx = np.repeat(np.arange(self.n_subjects), self.counts)
        return t, y, idx

    def subset(self, ids: Iterable[str]) -> "LongitudinalDataset":
        """Dataset restricted to ``ids`` in the given order."""
        pos = {sid: i for i, sid in enumerate(self.ids)}
        keep = [pos[s] for s in ids]
        return LongitudinalDataset(
            ids=tuple(self.ids[i] for i in keep),
            times=tuple(self.times[i] for i in keep),
            values=tuple(self.values[i] for i in keep),
            label=self.label,
            domain=self.domain,
        )

    def map_values(self, fn) -> "LongitudinalDataset":
        return LongitudinalDataset(
            ids=self.ids,
            times=self.times,
            values=tuple(fn(y) for y in self.values),
            label=self.label,
            domain=self.domain,
        )


@dataclass(frozen=True)
class CovariateMatrix:
    """Covariates x_i with a leading intercept column."""

    ids: tuple
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != len(self.ids):
            raise DataError("covariate matrix shape does not match ids")
        if v.shape[1] != len(self.names):
            raise DataError("covariate names do not match columns")
        if v.shape[1] == 0 or not np.all(v[:, 0] == 1.0):
            raise DataError("first covariate column must be the intercept (all 1)")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("covariate ids must be unique")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def intercept_only(cls, ids: Sequence[str]) -> "CovariateMatrix":
        return cls(ids=tuple(ids), names=("intercept",), values=np.ones((len(ids), 1)))

    def subset(self, ids: Iterable[str]) -> "CovariateMatrix":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        keep = [pos[s] for s in ids]
        return CovariateMatrix(
            ids=tuple(self.ids[i] for i in keep), names=self.names, values=self.values[keep]
        )


@dataclass(frozen=True)
class GenotypeMatrix:
    """Subjects by markers; entries 0/1/2 (raw) or 0/1 (dominant), NaN = missing."""

    ids: tuple
    marker_ids: tuple
    values: np.ndarray
    chromosomes: tuple = ()
    positions: np.ndarray = field(default_factory=lambda: np.empty(0))
    coding: str = "raw"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n, p = len(self.ids), len(self.marker_ids)
        if v.shape != (n, p):
            raise DataError(f"genotype values have shape {v.shape}, expected {(n, p)}")
        if self.coding not in ("raw", "dominant"):
            raise DataError(f"unknown coding {self.coding!r}")
        ok = np.isnan(v) | np.isin(v, (0.0, 1.0, 2.0)) | ((v >= 0) & (v <= 2))
        if not np.all(ok):
            raise DataError("genotype entries must lie in [0, 2] or be missing")
        if self.coding == "dominant" and np.nanmax(v, initial=0.0) > 1.0:
            raise DataError("dominant-coded genotypes must lie in [0, 1]")
        chrom = tuple(self.chromosomes) if len(self.chromosomes) else ("",) * p
        pos = np.asarray(self.positions, dtype=float)
        if pos.size == 0:
            pos = np.arange(p, dtype=float)
        if len(chrom) != p or pos.shape != (p,):
            raise DataError("marker map does not match genotype columns")
        if p > 1:
            keys = list(zip(chrom, pos))
            if any(keys[j] > keys[j + 1] for j in range(p - 1)):
                raise DataError("markers must be ordered by chromosome position")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "marker_ids", tuple(str(m) for m in self.marker_ids))
        object.__setattr__(self, "chromosomes", chrom)
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n_markers(self) -> int:
        return len(self.marker_ids)

    def frequencies(self) -> np.ndarray:
        """Per-marker frequency over non-missing entries.

        Carrier frequency under dominant coding, minor allele frequency
        (mean / 2) under raw coding.
        """
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(self.values, axis=0) if self.values.size else np.empty(0)
        return mean if self.coding == "dominant" else mean / 2.0

    def missing_rate(self) -> np.ndarray:
        return np.isnan(self.values).mean(axis=0)

    def carrier_count(self) -> np.ndarray:
        """Number of subjects carrying at least one minor allele."""
        return np.sum(np.nan_to_num(self.values, nan=0.0) > 0, axis=0)

    def select_markers(self, cols) -> "GenotypeMatrix":
        cols = np.asarray(cols, dtype=int)
        return replace(
            self,
            marker_ids=tuple(self.marker_ids[j] for j in cols),
            values=self.values[:, cols],
            chromosomes=tuple(self.chromosomes[j] for j in cols),
            positions=self.positions[cols],
        )

    def subset(self, ids: Iterable[str]) -> "GenotypeMatrix":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        keep = [pos[s] for s in ids]
        return replace(self, ids=tuple(self.ids[i] for i in keep), values=self.values[keep])


@dataclass(frozen=True)
class OutcomeScaling:
    """Pooled mean and SD used to standardize one outcome."""

    mean: float
    sd: float

    def apply(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.sd

    def invert(self, y):
        return np.asarray(y, dtype=float) * self.sd + self.mean


# ---------------------------------------------------------------------------
# text ingestion
# ---------------------------------------------------------------------------


def _read_text(source: Source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return fh.read()
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def _sniff_delimiter(header: str) -> str:
    return "\t" if header.count("\t") >= header.count(",") and "\t" in header else ","


def _read_table(source: Source, delimiter: str | None = None):
    text = _read_text(source)
    lines = [ln for ln in text.splitlines()]
    first = next((i for i, ln in enumerate(lines) if ln.strip() and not ln.startswith("#")), None)
    if first is None:
        raise DataError("empty file")
    delim = delimiter or _sniff_delimiter(lines[first])
    rows = []
    reader = csv.reader(io.StringIO("\n".join(lines[first:])), delimiter=delim)
    for offset, row in enumerate(reader):
        lineno = first + offset + 1
        if not row or all(not c.strip() for c in row) or row[0].startswith("#"):
            continue
        rows.append((lineno, [c.strip() for c in row]))
    header = rows[0][1]
    return header, rows[1:]


def _parse_float(tok: str, lineno: int, what: str) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse {what} {tok!r}") from None
    if not math.isfinite(val):
        raise DataError(f"line {lineno}: non-finite {what} {tok!r}")
    return val


def load_long_format(
    source: Source,
    schema: Mapping[str, str] | None = None,
    *,
    delimiter: str | None = None,
    label: str | None = None,
    domain: tuple | None = None,
) -> LongitudinalDataset:
    """Read a long-format outcome table into a :class:`LongitudinalDataset`.

    Parameters
    ----------
    source : path, text/binary stream or bytes
        Delimited text with a header row.
    schema : mapping, optional
        Maps the roles ``subject_id``, ``time`` and ``value`` to column names.
        Defaults to identically named columns.
    delimiter : str, optional
        Tab or comma; sniffed from the header when omitted.
    """
    roles = {"subject_id": "subject_id", "time": "time", "value": "value"}
    if schema:
        roles.update(schema)
    header, rows = _read_table(source, delimiter)
    try:
        cols = {role: header.index(name) for role, name in roles.items()}
    except ValueError as exc:
        raise DataError(f"missing column: {exc}") from None
    if not rows:
        raise DataError("no data rows")
    per_subject: dict[str, list[tuple[float, float]]] = {}
    width = max(cols.values()) + 1
    for lineno, row in rows:
        if len(row) < width:
            raise DataError(f"line {lineno}: expected at least {width} fields, got {len(row)}")
        sid = row[cols["subject_id"]]
        if not sid:
            raise DataError(f"line {lineno}: empty subject id")
        t = _parse_float(row[cols["time"]], lineno, "time")
        y = _parse_float(row[cols["value"]], lineno, "value")
        per_subject.setdefault(sid, []).append((t, y))
    ids = sorted(per_subject)
    times = [np.array([p[0] for p in per_subject[s]]) for s in ids]
    values = [np.array([p[1] for p in per_subject[s]]) for s in ids]
    return LongitudinalDataset(
        ids=tuple(ids),
        times=tuple(times),
        values=tuple(values),
        label=label or roles["value"],
        domain=domain,
    )


def write_long_format(ds: LongitudinalDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("subject_id\ttime\tvalue\n")
        for sid, t, y in zip(ds.ids, ds.times, ds.values):
            for ti, yi in zip(t, y):
                fh.write(f"{sid}\t{float(ti)!r}\t{float(yi)!r}\n")


def load_covariates(source: Source, *, delimiter: str | None = None) -> CovariateMatrix:
    """Read ``subject_id, x1..xq``; non-numeric columns are dummy coded.

    Subjects with a missing covariate are dropped with a warning.
    """
    header, rows = _read_table(source, delimiter)
    if not header or header[0] != "subject_id":
        raise DataError("covariate file must start with a subject_id column")
    names = header[1:]
    raw = []
    dropped = 0
    for lineno, row in rows:
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        if any(tok in MISSING_TOKENS for tok in row[1:]):
            dropped += 1
            continue
        raw.append(row)
    if dropped:
        logger.warning("dropped %d subjects with missing covariates", dropped)
    if not raw:
        raise DataError("no complete covariate rows")
    ids = [r[0] for r in raw]
    columns, col_names = [np.ones(len(raw))], ["intercept"]
    for j, name in enumerate(names, start=1):
        toks = [r[j] for r in raw]
        try:
            columns.append(np.array([float(t) for t in toks]))
            col_names.append(name)
        except ValueError:
            levels = sorted(set(toks))
            for lev in levels[1:]:
                columns.append(np.array([1.0 if t == lev else 0.0 for t in toks]))
                col_names.append(f"{name}={lev}")
    return CovariateMatrix(ids=tuple(ids), names=tuple(col_names), values=np.column_stack(columns))


def load_marker_map(source: Source, *, delimiter: str | None = None) -> dict[str, tuple[str, float]]:
    header, rows = _read_table(source, delimiter)
    try:
        im, ic, ip = header.index("marker_id"), header.index("chromosome"), header.index("position")
    except ValueError as exc:
        raise DataError(f"marker map missing column: {exc}") from None
    out = {}
    for lineno, row in rows:
        out[row[im]] = (row[ic], _parse_float(row[ip], lineno, "position"))
    return out


def _chrom_key(c: str):
    c = c.lower().removeprefix("chr")
    return (0, int(c), "") if c.isdigit() else (1, 0, c)


def load_genotypes(
    source: Source,
    marker_map: Source | Mapping[str, tuple[str, float]] | None = None,
    *,
    delimiter: str | None = None,
) -> GenotypeMatrix:
    """Read a ``subject_id, marker...`` genotype table (``NA`` = missing).

    With a marker map, columns are reordered by (chromosome, position);
    markers absent from the map are an error.
    """
    header, rows = _read_table(source, delimiter)
    if not header or header[0] != "subject_id":
        raise DataError("genotype file must start with a subject_id column")
    markers = header[1:]
    ids, mat = [], np.empty((len(rows), len(markers)))
    for i, (lineno, row) in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        for j, tok in enumerate(row[1:]):
            if tok in MISSING_TOKENS:
                mat[i, j] = np.nan
            else:
                val = _parse_float(tok, lineno, "genotype")
                if val not in (0.0, 1.0, 2.0):
                    raise DataError(f"line {lineno}: genotype {tok!r} not in {{0,1,2,NA}}")
                mat[i, j] = val
    if marker_map is None:
        return GenotypeMatrix(ids=tuple(ids), marker_ids=tuple(markers), values=mat)
    mmap = marker_map if isinstance(marker_map, Mapping) else load_marker_map(marker_map)
    missing = [m for m in markers if m not in mmap]
    if missing:
        raise DataError(f"markers absent from map: {', '.join(missing[:5])}")
    order = sorted(range(len(markers)), key=lambda j: (_chrom_key(mmap[markers[j]][0]), mmap[markers[j]][1], j))
    return GenotypeMatrix(
        ids=tuple(ids),
        marker_ids=tuple(markers[j] for j in order),
        values=mat[:, order],
        chromosomes=tuple(mmap[markers[j]][0] for j in order),
        positions=np.array([mmap[markers[j]][1] for j in order]),
    )


# ---------------------------------------------------------------------------
# transformations
# ---------------------------------------------------------------------------


def filter_min_observations(ds: LongitudinalDataset, r_min: int) -> LongitudinalDataset:
    """Keep subjects with at least ``r_min`` observations."""
    if r_min < 1:
        raise ValueError("r_min must be >= 1")
    keep = [sid for sid, t in zip(ds.ids, ds.times) if t.size >= r_min]
    if not keep:
        raise DataError(f"no subject has at least {r_min} observations")
    return ds.subset(keep)


def dominant_code(g: GenotypeMatrix) -> GenotypeMatrix:
    """Recode 0/1/2 genotypes as carrier indicators; missing stays missing."""
    if g.coding == "dominant":
        raise DataError("genotypes are already dominant coded")
    v = g.values
    out = np.where(np.isnan(v), np.nan, (v > 0).astype(float))
    return replace(g, values=out, coding="dominant")


def impute_missing(g: GenotypeMatrix) -> GenotypeMatrix:
    """Fill missing entries with the marker's empirical frequency.

    Carrier frequency under dominant coding, minor allele frequency under
    raw coding.
    """
    miss = np.isnan(g.values)
    if not miss.any():
        return g
    all_missing = miss.all(axis=0)
    if all_missing.any():
        bad = [g.marker_ids[j] for j in np.flatnonzero(all_missing)]
        raise DataError(f"markers entirely missing: {', '.join(bad)}")
    freq = g.frequencies()
    out = np.where(miss, freq[None, :], g.values)
    return replace(g, values=out)


def qc_filter(g: GenotypeMatrix, max_missing_rate: float = 0.05, min_carriers: int = 5) -> GenotypeMatrix:
    """Drop markers with missing rate >= ``max_missing_rate`` or < ``min_carriers`` carriers."""
    if not 0.0 <= max_missing_rate <= 1.0:
        raise ValueError("max_missing_rate must lie in [0, 1]")
    if min_carriers < 0:
        raise ValueError("min_carriers must be >= 0")
    keep = (g.missing_rate() < max_missing_rate) & (g.carrier_count() >= min_carriers)
    dropped = int(g.n_markers - keep.sum())
    if dropped:
        logger.info("qc_filter dropped %d of %d markers", dropped, g.n_markers)
    if not keep.any():
        logger.warning("qc_filter removed every marker")
    return g.select_markers(np.flatnonzero(keep))


def pooled_scaling(ds: LongitudinalDataset) -> OutcomeScaling:
    _, y, _ = ds.pooled()
    if y.size < 2:
        raise DataError("standardization needs at least two observations")
    mean = float(np.mean(y))
    sd = float(np.std(y, ddof=1))
    if not sd > 0:
        raise DataError(f"outcome {ds.label!r} has zero variance")
    return OutcomeScaling(mean=mean, sd=sd)


def standardize_outcome(ds: LongitudinalDataset) -> tuple[LongitudinalDataset, OutcomeScaling]:
    """Center and scale by the pooled mean and SD over all observations."""
    scaling = pooled_scaling(ds)
    return ds.map_values(scaling.apply), scaling
