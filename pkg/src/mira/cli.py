"""Command-line entry point: ``mira <command> ...``.

Failures print one line ``mira-error: <command>: <message>`` to stderr and
exit with status 1 (2 for bad usage).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .harness import (
    ABLATIONS,
    TrainConfig,
    TrainingDiverged,
    ablation,
    evaluate,
    gating_report,
    robustness_sweep,
    train,
    training_windows,
    write_summary,
)
from .model import ForecastRequest, MiraModel, ModelConfig
from .moe import write_gating_csv
from .series import (
    SAMPLING_MODES,
    SYNTH_KINDS,
    SeriesError,
    SynthParams,
    ingest_csv,
    make_windows,
    synth_generate,
    write_csv,
)

log = logging.getLogger("mira")

SEED_ENV = "MIRA_SEED"


class CLIError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# run configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    """Flat ``key = value`` run file; every key but ``data`` has a default."""

    data: str = ""
    eval_data: str = ""
    seed: int = 0
    # model
    layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    d_expert: int = 16
    experts: int = 4
    top_k: int = 2
    heads: int = 4
    max_seq_len: int = 512
    use_ctrope: bool = True
    use_moe: bool = True
    use_ode: bool = True
    ode_gradient: str = "adjoint"
    # solver
    rtol: float = 1e-6
    atol: float = 1e-6
    # loss
    huber_delta: float = 1.0
    aux_weight: float = 0.02
    # training
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    spectral_norm: bool = False
    free_running: bool = False
    context: int = 64
    horizon: int = 24
    stride: int = 4
    min_context: int = 1

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in vars(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)} - {"horizons"}
        return TrainConfig(**{k: v for k, v in vars(self).items() if k in names})


def _coerce(key: str, kind, text: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise CLIError(f"config key {key!r}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def parse_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    if path:
        parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                           delimiters=("=",), interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_string("[run]\n" + fh.read(), source=str(path))
        except OSError as exc:
            raise CLIError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise CLIError(f"config parse error: {exc.message.splitlines()[0]}") from None
        for key, text in parser["run"].items():
            if key not in types:
                raise CLIError(f"unknown config key {key!r}")
            values[key] = _coerce(key, types[key], text)
    else:
        values["seed"] = default_seed()
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        cfg = RunConfig(**values)
        cfg.model_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid configuration: {exc}") from None
    return cfg


# helpers -------------------------------------------------------------------------

def _load_series(path):
    try:
        return ingest_csv(path)
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc.strerror}") from None


def _load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except OSError as exc:
        raise CLIError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _windows(series, context, horizon, stride=None):
    out = []
    for s in series.values():
        out.extend(w for w in make_windows(s, context, horizon, stride or horizon)
                   if np.any(w.target_mask))
    return out


def _parse_rates(text: str) -> list[float]:
    text = text.strip()
    if ".." in text:
        span, _, step = text.partition(":")
        lo, hi = (float(x) for x in span.split(".."))
        step = float(step) if step else 0.1
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def _writable(path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise CLIError(f"cannot write {path}: directory does not exist")
    return path


# commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    params = SynthParams(points=args.points, sampling=args.sampling, rate=args.rate,
                         noise=args.noise)
    out = _writable(args.out)
    series = [synth_generate(args.kind, params, seed=args.seed * 1000 + i,
                             series_id=f"{args.kind}-{i}") for i in range(args.series)]
    try:
        write_csv(out, series)
    except OSError as exc:
        raise CLIError(f"cannot write {out}: {exc.strerror}") from None


def cmd_train(args) -> None:
    cfg = parse_run_config(args.config, {"steps": args.steps, "seed": args.seed})
    if not cfg.data:
        raise CLIError("config key 'data' is required for training")
    out = _writable(args.out_checkpoint)
    series = _load_series(cfg.data)
    windows = training_windows(series.values(), cfg.context, cfg.horizon, cfg.stride,
                               cfg.min_context)
    if not windows:
        raise CLIError("training data yields no windows")
    model = MiraModel(cfg.model_config())
    try:
        model, curve = train(model, windows, cfg.train_config(), progress=args.verbose)
    except TrainingDiverged as exc:
        raise CLIError(str(exc)) from None
    if curve.total and not math.isfinite(curve.total[-1]):
        raise CLIError("final loss is not finite")
    checkpoint.save(out, model, width=args.width)
    curve_path = args.loss_curve or str(out) + ".loss.csv"
    curve.write_csv(curve_path)


def cmd_forecast(args) -> None:
    model, _ = _load_checkpoint(args.checkpoint)
    series = _load_series(args.input_csv)
    targets: list[tuple[str, float, int]] = []
    with open(args.targets_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and [h.strip() for h in header] != ["series_id", "timestamp"]:
            raise CLIError(f"{args.targets_csv}: line 1: expected header series_id,timestamp")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise CLIError(f"{args.targets_csv}: line {line_no}: expected 2 fields")
            sid = row[0].strip()
            try:
                ts = float(row[1])
            except ValueError:
                raise CLIError(f"{args.targets_csv}: line {line_no}: bad timestamp {row[1]!r}") from None
            if sid not in series:
                raise CLIError(f"{args.targets_csv}: line {line_no}: unknown series {sid!r}")
            s = series[sid]
            observed = ~np.isnan(s.values)
            last = float(s.timestamps[observed][-1]) if observed.any() else None
            if last is None:
                raise CLIError(f"{args.targets_csv}: line {line_no}: series {sid!r} has no observations")
            if ts <= last:
                raise CLIError(f"{args.targets_csv}: line {line_no}: target {ts!r} is not after "
                               f"last observation {last!r} of series {sid!r}")
            targets.append((sid, ts, line_no))

    per_series: dict[str, list[tuple[float, int]]] = {}
    for sid, ts, line_no in targets:
        prev = per_series.setdefault(sid, [])
        if prev and ts <= prev[-1][0]:
            raise CLIError(f"{args.targets_csv}: line {line_no}: targets of {sid!r} must increase")
        prev.append((ts, line_no))
    results: dict[tuple[str, int], float] = {}
    ids = list(per_series)
    requests = []
    for sid in ids:
        s = series[sid]
        keep = ~np.isnan(s.values)
        t, x = s.timestamps[keep][-args.context:], s.values[keep][-args.context:]
        requests.append(ForecastRequest(t, x, [ts for ts, _ in per_series[sid]]))
    preds = model.forecast(requests) if requests else []
    for sid, p in zip(ids, preds):
        for (ts, line_no), v in zip(per_series[sid], p):
            results[(sid, line_no)] = float(v)
    out = _writable(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "timestamp", "prediction"])
        for sid, ts, line_no in targets:
            w.writerow([sid, repr(ts), repr(results[(sid, line_no)])])


def _out_prefix(args, default: str) -> str:
    prefix = args.out_prefix or default
    _writable(prefix + ".csv")
    return prefix


def cmd_eval(args) -> None:
    model, _ = _load_checkpoint(args.checkpoint)
    series = _load_series(args.data)
    horizons = [int(h) for h in args.horizons.split(",")]
    prefix = _out_prefix(args, "eval")
    from .harness import EvalReport
    report = EvalReport()
    for h in horizons:
        windows = _windows(series, args.context, h)
        if not windows:
            raise CLIError(f"no evaluation windows for horizon {h}")
        report.rows.extend(evaluate(model, windows, dataset=Path(args.data).stem).rows)
    report.write_csv(prefix + ".csv")
    write_summary(prefix + ".json", {"command": "eval", **report.to_dict()})


def cmd_sweep(args) -> None:
    model, _ = _load_checkpoint(args.checkpoint)
    series = _load_series(args.data)
    rates = _parse_rates(args.rates)
    prefix = _out_prefix(args, "sweep")
    rows = robustness_sweep(model, list(series.values()), rates, args.context, args.horizon,
                            seed=args.seed)
    with open(prefix + ".csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "rmse", "mae", "naive_rmse", "naive_mae", "count", "windows"])
        for r in rows:
            w.writerow([repr(r.rate), repr(r.rmse), repr(r.mae), repr(r.naive_rmse),
                        repr(r.naive_mae), r.count, r.windows])
    write_summary(prefix + ".json", {"command": "sweep", "rows": [vars(r) for r in rows]})


def cmd_ablate(args) -> None:
    cfg = parse_run_config(args.config, {"steps": args.steps, "seed": args.seed})
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    unknown = set(toggles) - set(ABLATIONS)
    if unknown:
        raise CLIError(f"unknown toggles {sorted(unknown)}; choose from {sorted(ABLATIONS)}")
    if not cfg.data:
        raise CLIError("config key 'data' is required for ablations")
    prefix = _out_prefix(args, "ablate")
    train_series = _load_series(cfg.data)
    eval_series = _load_series(cfg.eval_data) if cfg.eval_data else train_series
    tw = training_windows(train_series.values(), cfg.context, cfg.horizon, cfg.stride)
    ew = _windows(eval_series, cfg.context, cfg.horizon)
    reports = ablation(cfg.model_config(), toggles, tw, ew, cfg.train_config())
    with open(prefix + ".csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "horizon", "rmse", "mae", "naive_rmse", "naive_mae", "count"])
        for label, rep in reports.items():
            for r in rep.rows:
                w.writerow([label, r.horizon, repr(r.rmse), repr(r.mae), repr(r.naive_rmse),
                            repr(r.naive_mae), r.count])
    write_summary(prefix + ".json", {"command": "ablate",
                                     "variants": {k: v.to_dict() for k, v in reports.items()}})


def cmd_gating_stats(args) -> None:
    model, _ = _load_checkpoint(args.checkpoint)
    series = _load_series(args.data)
    prefix = _out_prefix(args, "gating")
    windows = _windows(series, args.context, 1, stride=args.context)
    if not windows:
        raise CLIError("no windows for gating statistics")
    rows = gating_report(model, windows)
    write_gating_csv(prefix + ".csv", rows)
    write_summary(prefix + ".json", {"command": "gating-stats", "rows": [
        {"layer": l, "expert": e, "selection_fraction": f, "mean_score": r} for l, e, f, r in rows]})


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mira", description="Irregular time-series forecasting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic CSV")
    g.add_argument("--kind", choices=SYNTH_KINDS, default="sinusoid-mixture")
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--sampling", choices=SAMPLING_MODES + ("exponential",), default="regular-grid")
    g.add_argument("--rate", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--series", type=int, default=1)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--width", type=int, choices=(32, 64), default=64)
    t.add_argument("--loss-curve")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="forecast at known target timestamps")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--input-csv", required=True)
    f.add_argument("--targets-csv", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--context", type=int, default=64)
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("eval", help="RMSE/MAE against the naive baseline")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizons", default="24,32,48,64")
    e.add_argument("--context", type=int, default=64)
    e.add_argument("--out-prefix")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="missing-rate robustness sweep")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--rates", default="0.1..0.9")
    s.add_argument("--context", type=int, default=64)
    s.add_argument("--horizon", type=int, default=24)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-prefix")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="train and compare ablated variants")
    a.add_argument("--config", required=True)
    a.add_argument("--toggles", default="ctrope,moe,ode")
    a.add_argument("--steps", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--out-prefix")
    a.set_defaults(func=cmd_ablate)

    q = sub.add_parser("gating-stats", help="per-layer expert selection frequencies")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--context", type=int, default=64)
    q.add_argument("--out-prefix")
    q.set_defaults(func=cmd_gating_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "sampling", None) == "exponential":
        args.sampling = "exponential-inter-arrival"
    try:
        # run configs carry their own seed; the environment default applies elsewhere
        if getattr(args, "seed", "absent") is None and not hasattr(args, "config"):
            args.seed = default_seed()
        args.func(args)
    except (CLIError, SeriesError, checkpoint.CheckpointError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"mira-error: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
