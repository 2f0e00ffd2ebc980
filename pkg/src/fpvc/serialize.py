"""Plain-text persistence for FPCA models and score tables.

A model file is tab-separated, one keyed record per line::

    fpvc-model      1
    label           <outcome label>
    scaling         <mean> <sd>          (or "none")
    grid            t_1 ... t_M
    h_mean          <bandwidth>
    h_cov           <bandwidth>
    sigma2          <value>
    fve             <value>
    mean            mu(t_1) ... mu(t_M)
    eigenvalues     lambda_1 ... lambda_K
    all_eigenvalues <full spectrum>
    phi             phi_k(t_1) ... phi_k(t_M)      (K lines)
    surface         G(t_m, t_1) ... G(t_m, t_M)    (M lines)

Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import numpy as np

from .data import OutcomeScaling
from .fpca import FpcaModel, fve_curve
from .scores import ScoreMatrix
from .smoothing import CovSurface, EvalGrid, MeanCurve

MAGIC = "fpvc-model"
VERSION = "1"


def _row(key, values) -> str:
    return "\t".join([key] + [repr(float(v)) for v in np.ravel(values)])


def dump_model(model: FpcaModel) -> str:
    lines = [f"{MAGIC}\t{VERSION}", f"label\t{model.label}"]
    sc = model.scaling
    lines.append("scaling\tnone" if sc is None else _row("scaling", [sc.mean, sc.sd]))
    lines += [
        _row("grid", model.grid.points),
        _row("h_mean", [model.mean.bandwidth]),
        _row("h_cov", [model.surface.bandwidth]),
        _row("sigma2", [model.sigma2]),
        _row("fve", [model.fve]),
        _row("mean", model.mean.values),
        _row("eigenvalues", model.eigenvalues),
        _row("all_eigenvalues", model.all_eigenvalues),
    ]
    lines += [_row("phi", phi) for phi in model.eigenfunctions]
    lines += [_row("surface", row) for row in model.surface.values]
    return "\n".join(lines) + "\n"


def save_model(model: FpcaModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_model(model))


def parse_model(text: str) -> FpcaModel:
    records: dict[str, list] = {}
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split("\t")[0] != MAGIC:
        raise ValueError("not an fpvc model file")
    if lines[0].split("\t")[1:] != [VERSION]:
        raise ValueError(f"unsupported model version {lines[0]!r}")
    label = "outcome"
    scaling = None
    for ln in lines[1:]:
        key, *rest = ln.split("\t")
        if key == "label":
            label = rest[0] if rest else ""
        elif key == "scaling":
            if rest != ["none"]:
                scaling = OutcomeScaling(float(rest[0]), float(rest[1]))
        else:
            records.setdefault(key, []).append(np.array([float(v) for v in rest]))
    try:
        grid = EvalGrid(records["grid"][0])
        one = {k: float(records[k][0][0]) for k in ("h_mean", "h_cov", "sigma2", "fve")}
        mean = MeanCurve(grid, records["mean"][0], one["h_mean"])
        surface = CovSurface(grid, np.vstack(records["surface"]), one["h_cov"], one["sigma2"])
        lam = records["eigenvalues"][0]
        phis = np.vstack(records["phi"]) if "phi" in records else np.empty((0, grid.m))
        allv = records["all_eigenvalues"][0]
    except KeyError as exc:
        raise ValueError(f"model file lacks {exc.args[0]!r}") from None
    if phis.shape != (lam.size, grid.m) or surface.values.shape != (grid.m, grid.m):
        raise ValueError("model file has inconsistent dimensions")
    for a in (lam, phis, allv):
        a.setflags(write=False)
    return FpcaModel(
        grid=grid,
        mean=mean,
        surface=surface,
        eigenvalues=lam,
        eigenfunctions=phis,
        sigma2=one["sigma2"],
        fve=one["fve"] if lam.size else float(fve_curve(allv)[0]),
        all_eigenvalues=allv,
        label=label,
        scaling=scaling,
    )


def load_model(path) -> FpcaModel:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


def write_scores(sm: ScoreMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["subject_id"] + [f"xi_{k}" for k in range(1, sm.k + 1)]) + "\n")
        for sid, row in zip(sm.ids, sm.scores):
            fh.write("\t".join([sid] + [repr(float(v)) for v in row]) + "\n")
