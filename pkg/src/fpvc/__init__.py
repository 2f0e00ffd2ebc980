"""Functional principal variance component tests for longitudinal outcomes and marker sets."""

__version__ = "0.1.0"

from .data import (
    CovariateMatrix,
    GenotypeMatrix,
    LongitudinalDataset,
    OutcomeScaling,
    dominant_code,
    filter_min_observations,
    impute_missing,
    load_covariates,
    load_genotypes,
    load_long_format,
    qc_filter,
    standardize_outcome,
)
from .fpca import FpcaConfig, FpcaModel, fit_fpca, predict_trajectory, select_k
from .scores import ScoreMatrix, blup_scores, refit_scores
from .vctest import VcConfig, VcTestResult, bh_reject, fisher_combine, fpvc_test, fpvc_test_scores
from .chisq_mixture import mixture_survival

__all__ = [
    "CovariateMatrix",
    "FpcaConfig",
    "FpcaModel",
    "GenotypeMatrix",
    "LongitudinalDataset",
    "OutcomeScaling",
    "ScoreMatrix",
    "VcConfig",
    "VcTestResult",
    "bh_reject",
    "blup_scores",
    "dominant_code",
    "filter_min_observations",
    "fisher_combine",
    "fit_fpca",
    "fpvc_test",
    "fpvc_test_scores",
    "impute_missing",
    "load_covariates",
    "load_genotypes",
    "load_long_format",
    "mixture_survival",
    "predict_trajectory",
    "qc_filter",
    "refit_scores",
    "select_k",
    "standardize_outcome",
]
