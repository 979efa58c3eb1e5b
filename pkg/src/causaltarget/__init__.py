"""Causal-targeting toolkit.

Honest causal-forest CATE estimation, cross-fitted AIPW policy evaluation,
predictive vs causal vs hybrid targeting policies, heterogeneity diagnostics,
and a semi-synthetic heterogeneity-dial simulation, validated on synthetic
data with known ground truth.
"""

from ._kernels import BACKEND as kernel_backend
from .dgp import (Dataset, DgpConfig, RedrawSpec, generate_synthetic,
                  load_dataset, save_dataset, semisynthetic_redraw)
from .errors import (CausalTargetError, CollinearityError, ConfigError,
                     DegenerateScores, EstimationError, MissingSupportError)
from .forest import (ForestModel, ForestParams, fit_causal_forest,
                     fit_regression_forest, oob_estimates, predict_cate,
                     predict_regression, predict_weights, variable_importance)
from .glm import (AipwScoreSet, FoldAssignment, LogitFit, ate_aipw,
                  ate_mean_difference, crossfit_nuisances, expit,
                  fit_logistic, logit, make_folds)
from .heterogeneity import calibration_regression, gates, group_comparison
from .targeting import (POLICY_NAMES, PolicyCurve, RateResult, ScoringPolicy,
                        build_policy, make_aux_flag, policy_value_curve,
                        rate_autoc, simple_difference_value, simulation_study,
                        toc_curve)

__version__ = "0.1.0"

__all__ = [
    "AipwScoreSet", "CausalTargetError", "CollinearityError", "ConfigError",
    "Dataset", "DegenerateScores", "DgpConfig", "EstimationError",
    "FoldAssignment", "ForestModel", "ForestParams", "LogitFit",
    "MissingSupportError", "POLICY_NAMES", "PolicyCurve", "RateResult",
    "RedrawSpec", "ScoringPolicy", "ate_aipw", "ate_mean_difference",
    "build_policy", "calibration_regression", "crossfit_nuisances", "expit",
    "fit_causal_forest", "fit_logistic", "fit_regression_forest", "gates",
    "generate_synthetic", "group_comparison", "kernel_backend",
    "load_dataset", "logit", "make_aux_flag", "make_folds", "oob_estimates",
    "policy_value_curve", "predict_cate", "predict_regression",
    "predict_weights", "rate_autoc", "save_dataset", "semisynthetic_redraw",
    "simple_difference_value", "simulation_study", "toc_curve",
    "variable_importance",
]
