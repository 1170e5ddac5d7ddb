"""Bayesian latent factor models for rating prediction."""

from .baselines import FactorModel, SgdConfig, predict_map, train_pmf, train_svd, train_svd_bias
from .blfm import (
    PriorSpec, VariationalPosterior, ViConfig, elbo, elbo_gradient, expected_sq_err, fit_vi,
    init_posterior, kl_gaussian, predict_expected, sample_posterior,
)
from .errors import (
    DivergenceError, EmptyDatasetError, ParseError, ShapeMismatchError, SplitError,
)
from .evaluate import EvalReport, TraceReport, overfit_gap, rmse, sweep, trace_parameter
from .ingest import Interaction, RatingsDataset, dataset_stats, parse_movielens
from .split import SplitResult, leave_latest_out, sample_validation

__version__ = "0.1.0"
