"""Individualized coefficient alpha via inverse-probability-weighted GEE."""
from .data import ModelSpec, StudyData, build_pair_index, load_study, write_study
from .estimator import IndividualizedAlpha
from .exceptions import DataError, IndAlphaError, SaturationError, SeparationError, SingularMatrixError
from .gee import GeeFit, fit_gee
from .inference import (AlphaEstimate, alpha_estimate, alpha_range_test, naive_overall_alpha,
                        naive_pairwise_alpha, sandwich_covariance, wald_test)
from .missingness import MissingnessFit, MissingnessModel, fit_missingness
from .report import FitReport
from .simulation import McSummary, SimDesign, power_curve, run_mc, simulate_study

__version__ = "0.1.0"

__all__ = [
    "AlphaEstimate", "DataError", "FitReport", "GeeFit", "IndAlphaError", "IndividualizedAlpha",
    "McSummary", "MissingnessFit", "MissingnessModel", "ModelSpec", "SaturationError",
    "SeparationError", "SimDesign", "SingularMatrixError", "StudyData", "alpha_estimate",
    "alpha_range_test", "build_pair_index", "fit_gee", "fit_missingness", "load_study",
    "naive_overall_alpha", "naive_pairwise_alpha", "power_curve", "run_mc", "sandwich_covariance", "simulate_study",
    "wald_test", "write_study",
]
