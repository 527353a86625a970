"""Training, evaluation, robustness sweeps, ablations and gating reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .model import ForecastRequest, MiraModel, ModelConfig, pack
from .moe import RoutingStats, gating_rows, merge_stats
from .node import spectral_normalize
from .series import IrregularSeries, Window, make_windows, mask_random, normalize

log = logging.getLogger(__name__)

DEFAULT_HORIZONS = (24, 32, 48, 64)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    context: int = 64
    horizon: int = 24
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    spectral_norm: bool = False
    free_running: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1: float, beta2: float,
                 eps: float):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class LossCurve:
    steps: list[int] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    huber: list[float] = field(default_factory=list)
    aux: list[float] = field(default_factory=list)

    def append(self, step, total, huber, aux):
        self.steps.append(step)
        self.total.append(total)
        self.huber.append(huber)
        self.aux.append(aux)

    def smoothed(self, window: int = 25) -> np.ndarray:
        x = np.asarray(self.total)
        if x.size == 0:
            return x
        window = max(1, min(window, x.size))
        kernel = np.ones(window) / window
        return np.convolve(x, kernel, mode="valid")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "total", "huber", "aux"])
            for row in zip(self.steps, self.total, self.huber, self.aux):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def training_windows(series: Iterable[IrregularSeries], context: int, horizon: int,
                     stride: int = 1, min_context: int = 1) -> list[Window]:
    out = []
    for s in series:
        for w in make_windows(s, context, horizon, stride, min_context):
            if np.any(w.target_mask):
                out.append(normalize(w)[0])
    return out


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train(model: MiraModel, data: Sequence[Window], config: TrainConfig = TrainConfig(),
          progress: bool = False) -> tuple[MiraModel, LossCurve]:
    """Adam on the Huber + balancing objective over normalized windows, in place.

    Batches are drawn with a generator seeded from ``config.seed``, so two
    runs with the same model initialisation and data are identical.
    """
    if not data:
        raise ValueError("no training windows")
    too_long = [w for w in data if len(w.context_timestamps) + len(w.target_timestamps)
                > model.config.max_seq_len]
    if too_long:
        raise ValueError(f"{len(too_long)} windows exceed max sequence length {model.config.max_seq_len}")
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    curve = LossCurve()
    sn_state = None
    by_id = {id(p): k for k, p in params.items()}
    for step in range(config.steps):
        idx = rng.choice(len(data), size=min(config.batch_size, len(data)), replace=False)
        batch = [data[i] for i in idx]
        if config.free_running:
            lb = model.free_running_loss(batch)
        else:
            lb = model.loss(batch)
        total = lb.total.item()
        if not math.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: huber={lb.huber!r}, aux={lb.aux!r}"
            )
        gmap = ad.backward(lb.total)
        grads = {by_id[k]: g for k, g in gmap.items() if k in by_id}
        for p in params.values():
            p.grad = None
        clip_gradients(grads, config.clip_norm)
        opt.step(grads)
        if config.spectral_norm and model.config.use_ode:
            sn_state = spectral_normalize(model.ode.parameters(), 1, sn_state)
        curve.append(step, total, lb.huber, lb.aux)
        if progress and step % 50 == 0:
            log.info("step %d loss %.5f (huber %.5f aux %.5f)", step, total, lb.huber, lb.aux)
    return model, curve


# evaluation -------------------------------------------------------------------

@dataclass
class EvalRow:
    dataset: str
    horizon: int
    rmse: float
    mae: float
    naive_rmse: float
    naive_mae: float
    count: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def row(self, horizon: int | None = None, dataset: str | None = None) -> EvalRow:
        for r in self.rows:
            if (horizon is None or r.horizon == horizon) and (dataset is None or r.dataset == dataset):
                return r
        raise KeyError(f"no row for horizon={horizon}, dataset={dataset}")

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "horizon", "rmse", "mae", "naive_rmse", "naive_mae", "count"])
            for r in self.rows:
                w.writerow([r.dataset, r.horizon, repr(r.rmse), repr(r.mae),
                            repr(r.naive_rmse), repr(r.naive_mae), r.count])


def error_metrics(truth, pred) -> tuple[float, float]:
    """(RMSE, MAE) over the entries where ``truth`` is observed."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    mask = ~np.isnan(truth)
    if not mask.any():
        raise ValueError("no observed targets to score")
    err = truth[mask] - pred[mask]
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))


def evaluate(model: MiraModel, windows: Sequence[Window], dataset: str = "data",
             predictions: Sequence[np.ndarray] | None = None) -> EvalReport:
    """RMSE/MAE in original units plus the last-value-carried-forward baseline.

    Windows are in original units; each is scaled by its own context.
    Pass ``predictions`` to score externally produced forecasts instead.
    """
    if not windows:
        raise ValueError("no windows to evaluate")
    if predictions is None:
        predictions = model.forecast([ForecastRequest.from_window(w) for w in windows])
    by_h: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        by_h.setdefault(len(w.target_timestamps), []).append(i)
    report = EvalReport()
    for h, idx in sorted(by_h.items()):
        truth = np.concatenate([windows[i].target_values for i in idx])
        pred = np.concatenate([predictions[i] for i in idx])
        naive = np.concatenate([np.full(h, windows[i].context_values[-1]) for i in idx])
        count = int(np.sum(~np.isnan(truth)))
        if count == 0:
            raise ValueError(f"all targets missing for horizon {h}")
        rmse, mae = error_metrics(truth, pred)
        nrmse, nmae = error_metrics(truth, naive)
        report.rows.append(EvalRow(dataset, h, rmse, mae, nrmse, nmae, count))
    return report


# robustness and ablations ------------------------------------------------------

@dataclass
class SweepRow:
    rate: float
    rmse: float
    mae: float
    naive_rmse: float
    naive_mae: float
    count: int
    windows: int


def robustness_sweep(model: MiraModel, series: Sequence[IrregularSeries], rates: Sequence[float],
                     context: int, horizon: int, stride: int | None = None,
                     seed: int = 0) -> list[SweepRow]:
    """Mask each series at each rate, re-window, and evaluate."""
    for r in rates:
        if not 0 <= r <= 0.9 + 1e-12:
            raise ValueError(f"sweep rates must lie in [0, 0.9], got {r}")
    stride = stride or horizon
    rows = []
    for rate in rates:
        windows = []
        for k, s in enumerate(series):
            masked = mask_random(s, rate, seed=seed * 100003 + k) if rate > 0 else s
            windows.extend(w for w in make_windows(masked, context, horizon, stride)
                           if np.any(w.target_mask))
        rep = evaluate(model, windows).rows[0]
        rows.append(SweepRow(float(rate), rep.rmse, rep.mae, rep.naive_rmse, rep.naive_mae,
                             rep.count, len(windows)))
    return rows


ABLATIONS = {
    "ctrope": ("w/o CT-RoPE", {"use_ctrope": False}),
    "moe": ("w/o MoE Block", {"use_moe": False}),
    "ode": ("w/o CT-Extrapolation Block", {"use_ode": False}),
}


def ablation(base: ModelConfig, toggles: Sequence[str], train_windows: Sequence[Window],
             eval_windows: Sequence[Window], config: TrainConfig = TrainConfig()
             ) -> dict[str, EvalReport]:
    """Train the base model and each toggled variant under one seed and budget."""
    unknown = set(toggles) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation toggles {sorted(unknown)}; expected {sorted(ABLATIONS)}")
    variants = [("full", base)]
    for t in toggles:
        label, change = ABLATIONS[t]
        variants.append((label, replace(base, **change)))
    reports = {}
    for label, cfg in variants:
        model, _ = train(MiraModel(cfg), train_windows, config)
        reports[label] = evaluate(model, eval_windows, dataset=label)
    return reports


def gating_report(model: MiraModel, windows: Sequence[Window], batch_size: int = 32
                  ) -> list[tuple[int, int, float, float]]:
    """Per-layer expert selection fractions and mean routing scores over ``windows``."""
    if not model.config.use_moe:
        raise ValueError("model has no MoE layers")
    per_layer: list[list[RoutingStats]] = [[] for _ in model.blocks]
    with ad.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = [normalize(w)[0] for w in windows[start:start + batch_size]]
            times, values, valid = pack([(w.context_timestamps, w.context_values) for w in chunk])
            _, stats = model.forward(times, values, valid)
            for l, st in enumerate(stats):
                per_layer[l].append(st)
    return gating_rows([merge_stats(s) for s in per_layer])


def write_summary(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
