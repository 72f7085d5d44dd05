"""Probabilistic autoregressive forecasting with Monte-Carlo inference,
gradient estimators for expectations of forecast statistics, and
norm-constrained input perturbations against them."""

from .attack import AttackConfig, AttackResult, AttackTarget, pgd_attack, select_c, weighted_norm
from .estimators import GradientEstimate, estimator_agreement, reparam_gradient, score_function_gradient
from .model import ForecastModel, init_model, load_checkpoint, save_checkpoint, train
from .sampling import (
    TRIVIAL,
    Observation,
    Statistic,
    TrajectoryBatch,
    apply_observation,
    bayes_expectation,
    confidence_interval,
    draw_noise,
    estimate,
    mc_expectation,
    sample_batch,
)

__version__ = "0.1.0"
