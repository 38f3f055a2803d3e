"""Regression and inference on linked data files contaminated by mismatch error."""
from .data import LinkedDataset, LinkedRecord, Schema, SchemaError, DataParseError, ingest_csv, write_csv
from .em import EMError, FitConfig, FitResult, e_step, pseudo_loglik, run_em
from .families import naive_fit
from .inference import (
    CovarianceEstimate, TestResult, bootstrap_covariance, model_covariance,
    sandwich_covariance, score_and_hessian, split_lrt,
)
from .marginals import default_marginal, fit_empirical_pmf, fit_gaussian_marginal, fit_kde, fit_nelson_aalen
from .match import MatchDesign, MatchModel, fit_match_weights
from .simulation import ScenarioSpec, SummaryTable, apply_circular_shift, generate, run_replications
from .spline import build_spline, run_gibbs

__all__ = [
    "LinkedDataset", "LinkedRecord", "Schema", "SchemaError", "DataParseError", "ingest_csv", "write_csv",
    "EMError", "FitConfig", "FitResult", "e_step", "pseudo_loglik", "run_em", "naive_fit",
    "CovarianceEstimate", "TestResult", "bootstrap_covariance", "model_covariance",
    "sandwich_covariance", "score_and_hessian", "split_lrt",
    "default_marginal", "fit_empirical_pmf", "fit_gaussian_marginal", "fit_kde", "fit_nelson_aalen",
    "MatchDesign", "MatchModel", "fit_match_weights",
    "ScenarioSpec", "SummaryTable", "apply_circular_shift", "generate", "run_replications",
    "build_spline", "run_gibbs",
]
