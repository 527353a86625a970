"""Forecasting irregularly sampled time series with continuous-time rotary
attention, sparse mixture-of-experts layers and neural-ODE extrapolation."""

from .autodiff import Tensor, backward, finite_difference_check, no_grad, tensor
from .estimator import MiraForecaster
from .model import PRESETS, ForecastRequest, MiraModel, ModelConfig
from .series import IrregularSeries, Window, ingest_csv, make_windows, synth_generate, write_csv

__all__ = [
    "ForecastRequest",
    "IrregularSeries",
    "MiraForecaster",
    "MiraModel",
    "ModelConfig",
    "PRESETS",
    "Tensor",
    "Window",
    "backward",
    "finite_difference_check",
    "ingest_csv",
    "make_windows",
    "no_grad",
    "synth_generate",
    "tensor",
    "write_csv",
]

__version__ = "0.1.0"
