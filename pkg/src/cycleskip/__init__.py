"""Hierarchical model of self-tracked cycle lengths with latent skipped cycles."""

__version__ = "0.1.0"

from .dataset import CohortFilter, Dataset, ingest, read_csv, write_csv
from .errors import DataError, DomainError, NumericalError
from .evaluate import BaselineModel, ProposedModel, baseline_predict, median_cld, per_day_rmse_curve, rmse, stratify_by_cld
from .inference import (
    FitConfig,
    FitResult,
    GridSpec,
    adam_step,
    fit,
    mc_user_log_marginal,
    nll_gradient,
    quadrature_log_marginal,
)
from .model import (
    DEFAULT_U0,
    CycleHistory,
    Hyperparameters,
    ModelConfig,
    UserParameters,
    log_prior_density,
    observed_cycle_log_pmf,
    sample_user_params,
    skip_pmf,
    user_log_likelihood,
)
from .predict import (
    PredictiveQuery,
    Predictor,
    expected_next_cycle,
    next_cycle_conditional_pmf,
    next_cycle_unconditional_pmf,
    skip_posterior,
)
from .simulate import SimulationSpec, simulate_population, split_cohorts_by_skip
