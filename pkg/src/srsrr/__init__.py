"""Stratified rejective sampling and rerandomization for survey experiments."""

__version__ = "0.1.0"

from .adjustment import AdjustmentFit, ci_adjusted, fit_adjustment
from .allocator import AllocationInput, AllocationResult, optimal_adjusted, optimal_srse, optimal_srsrr
from .design import (
    Assignment,
    DesignEngine,
    DesignFailure,
    SampleSelection,
    joint_srsrr,
    rejective_sample,
    rerandomize,
    stratified_sample,
)
from .equivalence import equivalence_probe
from .estimator import (
    EstimateReport,
    ExperimentData,
    ci_unadjusted,
    diff_in_means,
    observe,
    oracle_covariance,
    variance_components,
)
from .plan import CheckedPlan, DesignPlan, calibrate_threshold, validate_plan
from .population import CovariateSchema, Population, load_population, stratum_moments
from .simlab import DgpSpec, ScenarioConfig, generate_population, run_study
from .statkit import RngStream, chi2_cdf, chi2_quantile, nu

__all__ = [
    "AdjustmentFit", "AllocationInput", "AllocationResult", "Assignment", "CheckedPlan", "CovariateSchema",
    "DesignEngine", "DesignFailure", "DesignPlan", "DgpSpec", "EstimateReport", "ExperimentData", "Population",
    "RngStream", "SampleSelection", "ScenarioConfig", "calibrate_threshold", "chi2_cdf", "chi2_quantile",
    "ci_adjusted", "ci_unadjusted", "diff_in_means", "equivalence_probe", "fit_adjustment", "generate_population",
    "joint_srsrr", "load_population", "nu", "observe", "optimal_adjusted", "optimal_srse", "optimal_srsrr",
    "oracle_covariance", "rejective_sample", "rerandomize", "run_study", "stratified_sample", "stratum_moments",
    "validate_plan", "variance_components",
]
