"""Command-line entry point: ``fpvc {fpca,scores,test,scan,simulate}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .data import (
    CovariateMatrix,
    dominant_code,
    filter_min_observations,
    impute_missing,
    load_covariates,
    load_genotypes,
    load_long_format,
    standardize_outcome,
)
from .fpca import FpcaConfig, fit_fpca
from .scan import emit_manhattan, load_scan_config, run_scan, write_scan_table
from .scores import compute_scores
from .serialize import load_model, save_model, write_scores
from .sim import METHODS, SimConfig, run_experiment
from .vctest import VcConfig, fpvc_test


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _domain(text: str | None):
    if text is None:
        return None
    lo, hi = (float(v) for v in text.split(","))
    return (lo, hi)


def cmd_fpca(args) -> int:
    ds = load_long_format(args.outcome, delimiter=args.delimiter, domain=_domain(args.domain))
    ds = filter_min_observations(ds, args.min_obs)
    scaling = None
    if not args.no_standardize:
        ds, scaling = standardize_outcome(ds)
    cfg = FpcaConfig(
        fve=args.fve,
        n_grid=args.grid,
        h_mean=args.h_mean,
        h_cov=args.h_cov,
        bandwidth_method=args.bandwidth,
        binning=args.binning,
    )
    model = fit_fpca(ds, cfg, scaling=scaling)
    save_model(model, args.out)
    logging.info("K=%d fve=%.4f sigma2=%.4g", model.k, model.fve, model.sigma2)
    return 0


def cmd_scores(args) -> int:
    model = load_model(args.model)
    ds = load_long_format(args.outcome, delimiter=args.delimiter, domain=_domain(args.domain))
    if model.scaling is not None:
        ds = ds.map_values(model.scaling.apply)
    write_scores(compute_scores(model, ds, args.kind), args.out)
    return 0


def cmd_test(args) -> int:
    if len(args.model) != len(args.outcome):
        raise SystemExit("give one --model per --outcome")
    models = [load_model(p) for p in args.model]
    datasets = [
        load_long_format(p, delimiter=args.delimiter, domain=(m.grid.lo, m.grid.hi))
        for p, m in zip(args.outcome, models)
    ]
    geno = load_genotypes(args.geno, args.map)
    if args.coding == "dominant":
        geno = dominant_code(geno)
    markers = _csv(args.set) if args.set else list(geno.marker_ids)
    index = {m: j for j, m in enumerate(geno.marker_ids)}
    missing = [m for m in markers if m not in index]
    if missing:
        raise SystemExit(f"unknown markers: {', '.join(missing)}")
    geno = impute_missing(geno.select_markers([index[m] for m in markers]))
    covar = load_covariates(args.covar) if args.covar else CovariateMatrix.intercept_only(datasets[0].ids)
    cfg = VcConfig(score_kind=args.kind, nuisance_kind=args.nuisance, tail_method=args.tail)
    res = fpvc_test(models, datasets, geno, None, covar, cfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("set\tQ\tp_value\tmethod\tn\ts\tK\tweights\n")
        fh.write(
            "\t".join(
                [
                    ",".join(markers),
                    repr(res.Q),
                    repr(res.p_value),
                    res.method_used,
                    str(res.n),
                    str(res.s),
                    ",".join(map(str, res.k)),
                    ",".join(repr(float(w)) for w in res.weights),
                ]
            )
            + "\n"
        )
    return 0


def cmd_scan(args) -> int:
    cfg = load_scan_config(args.config)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    result = run_scan(cfg)
    write_scan_table(result, args.out)
    if args.manhattan:
        emit_manhattan(result, args.manhattan)
    rejected = sum(r.rejected for r in result.rows)
    logging.info("%d windows, %d rejected, %d failed", len(result.rows), rejected, result.n_failed)
    return 0


def cmd_simulate(args) -> int:
    methods = _csv(args.methods)
    cfg = SimConfig(
        n=args.n,
        alpha=args.alpha,
        gamma=args.gamma,
        beta=args.beta,
        maf=args.maf,
        lambda_pois=args.lambda_pois,
        n_reps=args.reps,
        seed=args.seed,
        level=args.level,
    )
    res = run_experiment(cfg, methods, workers=args.workers)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("alpha\tgamma\tbeta\tn\tmethod\trate\tse\tn_ok\tn_failed\n")
        for row in res.rows():
            fh.write("\t".join(str(row[k]) for k in ("alpha", "gamma", "beta", "n", "method", "rate", "se", "n_ok", "n_failed")) + "\n")
    if args.pvalues:
        mat = np.column_stack([res.pvalues[(cfg.cell, m)] for m in methods])
        np.savetxt(args.pvalues, mat, delimiter="\t", header="\t".join(methods), comments="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpvc", description="Functional principal variance component testing.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail")
    sub = ap.add_subparsers(dest="command", required=True)

    def io_opts(p):
        p.add_argument("--delimiter", choices=["\t", ","], default=None, help="override delimiter sniffing")

    p = sub.add_parser("fpca", parents=[common], help="fit mean, covariance and eigenfunctions for one outcome")
    p.add_argument("--outcome", required=True)
    p.add_argument("--fve", type=float, default=0.99)
    p.add_argument("--grid", type=int, default=51)
    p.add_argument("--h-mean", type=float, default=None)
    p.add_argument("--h-cov", type=float, default=None)
    p.add_argument("--bandwidth", choices=["gcv", "loocv"], default="gcv")
    p.add_argument("--binning", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--min-obs", type=int, default=1)
    p.add_argument("--domain", help="t_min,t_max (default: observed range)")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--out", required=True)
    io_opts(p)
    p.set_defaults(func=cmd_fpca)

    p = sub.add_parser("scores", parents=[common], help="subject scores from a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--outcome", required=True)
    p.add_argument("--kind", choices=["blup", "refit"], default="blup")
    p.add_argument("--domain")
    p.add_argument("--out", required=True)
    io_opts(p)
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("test", parents=[common], help="test one marker set")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--outcome", nargs="+", required=True)
    p.add_argument("--geno", required=True)
    p.add_argument("--map", help="marker map (marker_id, chromosome, position)")
    p.add_argument("--covar")
    p.add_argument("--set", help="comma-separated marker ids (default: all)")
    p.add_argument("--coding", choices=["dominant", "raw"], default="dominant")
    p.add_argument("--kind", choices=["blup", "refit"], default="blup")
    p.add_argument("--nuisance", choices=["empirical", "logistic", "binomial"], default=None)
    p.add_argument("--tail", choices=["auto", "cf-inversion", "moment-matching"], default="auto")
    p.add_argument("--out", required=True)
    io_opts(p)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("scan", parents=[common], help="sliding-window scan from an INI config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--manhattan", help="also write plot data here")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("simulate", parents=[common], help="rejection rates under the simulation design")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--maf", type=float, default=0.1)
    p.add_argument("--lambda-pois", type=float, default=6.0)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--pvalues", help="also write per-replicate p-values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        logging.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
