"""scikit-learn style wrapper: ``MiraForecaster().fit(series).predict(contexts)``."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .harness import TrainConfig, train, training_windows
from .model import ForecastRequest, MiraModel, ModelConfig
from .series import IrregularSeries


def check_series(X, name: str = "X") -> list[IrregularSeries]:
    """Coerce ``X`` into a list of series.

    Accepts a sequence of :class:`IrregularSeries`, a sequence of
    ``(timestamps, values)`` pairs, or a 2-D array whose rows are series on
    the unit grid ``0, 1, 2, ...`` with NaN marking missing values.
    """
    if isinstance(X, IrregularSeries):
        return [X]
    if isinstance(X, np.ndarray) or (isinstance(X, Sequence) and X and np.isscalar(X[0])):
        arr = check_array(X, ensure_all_finite="allow-nan", ensure_2d=True, dtype=np.float64,
                          input_name=name)
        grid = np.arange(arr.shape[1], dtype=np.float64)
        return [IrregularSeries(str(i), grid, row) for i, row in enumerate(arr)]
    out = []
    for i, item in enumerate(X):
        if isinstance(item, IrregularSeries):
            out.append(item)
        else:
            try:
                t, v = item
            except (TypeError, ValueError):
                raise ValueError(f"{name}[{i}] is neither a series nor a (timestamps, values) pair") from None
            out.append(IrregularSeries(str(i), np.asarray(t, dtype=np.float64),
                                       np.asarray(v, dtype=np.float64)))
    if not out:
        raise ValueError(f"{name} contains no series")
    return out


def check_targets(target_timestamps, series: Sequence[IrregularSeries], horizon: int):
    """Per-series target timestamps; defaults to unit steps after the last timestamp."""
    if target_timestamps is None:
        return [s.timestamps[-1] + np.arange(1, horizon + 1, dtype=np.float64) for s in series]
    targets = [np.asarray(t, dtype=np.float64).ravel() for t in target_timestamps]
    if len(targets) != len(series):
        raise ValueError(f"got {len(targets)} target rows for {len(series)} series")
    return targets


class MiraForecaster(BaseEstimator, RegressorMixin):
    """Train a forecaster on a collection of irregular series and forecast known timestamps."""

    def __init__(self, layers=2, d_model=32, d_ff=64, d_expert=16, experts=4, top_k=2, heads=4,
                 use_ctrope=True, use_moe=True, use_ode=True, huber_delta=1.0, aux_weight=0.02,
                 context=64, horizon=24, stride=4, steps=500, batch_size=16, learning_rate=1e-3,
                 spectral_norm=False, random_state=0):
        self.layers = layers
        self.d_model = d_model
        self.d_ff = d_ff
        self.d_expert = d_expert
        self.experts = experts
        self.top_k = top_k
        self.heads = heads
        self.use_ctrope = use_ctrope
        self.use_moe = use_moe
        self.use_ode = use_ode
        self.huber_delta = huber_delta
        self.aux_weight = aux_weight
        self.context = context
        self.horizon = horizon
        self.stride = stride
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.spectral_norm = spectral_norm
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(layers=self.layers, d_model=self.d_model, d_ff=self.d_ff,
                           d_expert=self.d_expert, experts=self.experts, top_k=self.top_k,
                           heads=self.heads, use_ctrope=self.use_ctrope, use_moe=self.use_moe,
                           use_ode=self.use_ode, huber_delta=self.huber_delta,
                           aux_weight=self.aux_weight, seed=int(self.random_state or 0))

    def fit(self, X, y=None):
        series = check_series(X)
        windows = training_windows(series, self.context, self.horizon, self.stride)
        if not windows:
            raise ValueError(f"no training windows of context {self.context} and horizon "
                             f"{self.horizon}; series are too short")
        config = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.learning_rate,
                             seed=int(self.random_state or 0), context=self.context,
                             horizon=self.horizon, spectral_norm=self.spectral_norm)
        self.model_, self.loss_curve_ = train(MiraModel(self._model_config()), windows, config)
        self.n_series_ = len(series)
        return self

    def predict(self, X, target_timestamps=None):
        """Forecast each context in ``X`` at its target timestamps.

        Returns a 2-D array when every row has the same number of targets,
        otherwise a list of 1-D arrays.
        """
        check_is_fitted(self, "model_")
        series = check_series(X)
        targets = check_targets(target_timestamps, series, self.horizon)
        requests = []
        for s, tt in zip(series, targets):
            keep = ~np.isnan(s.values)
            if not keep.any():
                raise ValueError(f"series {s.id!r} has no observed values")
            requests.append(ForecastRequest(s.timestamps[keep][-self.context:],
                                            s.values[keep][-self.context:], tt))
        preds = self.model_.forecast(requests)
        if len({p.shape for p in preds}) == 1:
            return np.stack(preds)
        return preds
