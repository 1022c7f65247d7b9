"""Inference on SHAP-based feature importance: learning the marginal SHAP curve
with an orthogonal loss, and confidence intervals for its p-th absolute moment."""

from .core_data import Dataset, DataError, load_dataset, save_dataset, shapley_weight
from .gaussian import GaussianCovariateModel, fit_gaussian, omega_s, zeta_s, conditional_sample
from .learners import LearnerConfig, LinearModel, fit_learner, model_from_json
from .shap import SubsetStrategy, psi_score, shap_curve_mc
from .smoothing import SmoothingSpec, BetaSchedule, beta_for_n, varphi, varphi_prime, varphi_second
from .curve import CurveNuisances, FitProtocol, GaussianZeta, fit_shap_curve, ortho_loss, naive_loss
from .inference import (
    NuisanceBundle,
    PowerConfig,
    PowerEstimate,
    confidence_interval,
    estimate_power,
    linear_power_config,
    u_statistic,
)
from .simulation import aggregate, generate_run, run_coverage_study, run_curve_experiment

__version__ = "0.1.0"
