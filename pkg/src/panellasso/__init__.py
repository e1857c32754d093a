"""Lasso and adaptive Lasso for fixed-effects panel data."""

from .estimators import AdaptivePanelLasso, PanelLasso, PanelLassoBIC
from .lasso_solver import (
    LassoSolution,
    SolverSettings,
    WeightedLassoProblem,
    kkt_residuals,
    lambda_max,
    soft_threshold,
    solve,
)
from .panel_lasso import (
    ConvergenceError,
    InfeasibleError,
    PanelFit,
    PenaltyPair,
    RankDeficientError,
    fit_adaptive,
    fit_adaptive_weighted,
    fit_bic,
    fit_panel_lasso,
    fit_single_penalty_reduction,
    ols_all,
    ols_oracle,
    predict,
)
from .panel_model import (
    DesignMatrix,
    InvalidInputError,
    PanelDataset,
    ScalingMatrix,
    TrueModel,
    assemble_design,
    residual_sum_of_squares,
    standardize_covariates,
)
from .simulation import ExperimentConfig, compute_metrics, generate_panel, preset, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AdaptivePanelLasso", "PanelLasso", "PanelLassoBIC",
    "LassoSolution", "SolverSettings", "WeightedLassoProblem", "kkt_residuals", "lambda_max",
    "soft_threshold", "solve",
    "ConvergenceError", "InfeasibleError", "PanelFit", "PenaltyPair", "RankDeficientError",
    "fit_adaptive", "fit_adaptive_weighted", "fit_bic", "fit_panel_lasso",
    "fit_single_penalty_reduction", "ols_all", "ols_oracle", "predict",
    "DesignMatrix", "InvalidInputError", "PanelDataset", "ScalingMatrix", "TrueModel",
    "assemble_design", "residual_sum_of_squares", "standardize_covariates",
    "ExperimentConfig", "compute_metrics", "generate_panel", "preset", "run_experiment",
]
