"""Conditional approximate normalizing flows for multi-step load forecasting.

A RealNVP flow is fit to full load trajectories, approximated by a Gaussian
mixture fit to flow samples, and that mixture is conditioned analytically on
the observed past. Baselines (conditional Gaussian, conditional mixture,
mixture-density networks, iterative autoregressive models) share one
forecasting interface, and a value-at-risk scheduler turns forecasts into
decisions.
"""

from .errors import CanfError, ConfigError, DataError, NumericError
from .gaussian import MultivariateGaussian, fit_gaussian, gaussian_condition, gaussian_log_pdf, gaussian_sample
from .mixture import GaussianMixture, em_fit, gmm_condition, gmm_log_pdf, gmm_sample, select_k
from .flow import RealNvpFlow, flow_forward, flow_inverse, flow_log_pdf, flow_sample, train_flow
from .dataset import LoadSeries, SequenceDataset, SynthParams, load_csv, rolling_windows, standardize, synth_load, week_split
from .forecasters import ForecasterConfig, fit_forecaster, load_forecaster
from .evaluation import decision_score, eval_metrics, mc_kl, proportional_regret, select_action

__version__ = "0.1.0"
