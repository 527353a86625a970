"""Irregular time-series data model: ingestion, quantization, windows, masking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

MISSING = float("nan")
STD_FLOOR = 1e-8
JITTER_SCALE = 1e-7


class SeriesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IrregularSeries:
    id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.timestamps, dtype=np.float64)
        v = np.array(self.values, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape:
            raise SeriesError(f"series {self.id!r}: timestamps {t.shape} and values {v.shape} differ")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise SeriesError(f"series {self.id!r}: timestamps must be finite and >= 0")
        if np.any(np.diff(t) <= 0):
            raise SeriesError(f"series {self.id!r}: timestamps must be strictly increasing")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.timestamps.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, IrregularSeries):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass(frozen=True, eq=False)
class Window:
    context_timestamps: np.ndarray
    context_values: np.ndarray
    target_timestamps: np.ndarray
    target_values: np.ndarray
    series_id: str = ""

    def __post_init__(self):
        if np.any(np.isnan(self.context_values)):
            raise SeriesError("window context must not contain missing values")
        if self.context_timestamps.size and self.target_timestamps.size:
            if self.context_timestamps[-1] >= self.target_timestamps[0]:
                raise SeriesError("context timestamps must precede target timestamps")

    @property
    def target_mask(self) -> np.ndarray:
        return ~np.isnan(self.target_values)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std >= STD_FLOOR:
            raise SeriesError(f"std {self.std} below floor {STD_FLOOR}")


# quantization -------------------------------------------------------------------

def jitter_unit(raw: np.ndarray) -> float:
    """Spacing the tie-breaking fallback inserts between colliding timestamps."""
    scale = float(np.max(np.abs(raw))) if raw.size else 0.0
    return JITTER_SCALE * max(1.0, scale)


def _float32_spacing(raw: np.ndarray) -> float:
    scale = float(np.max(np.abs(raw))) if raw.size else 0.0
    return float(np.spacing(np.float32(2.0 * max(1.0, scale))))


def quantization_bound(raw, resolution: float) -> np.ndarray:
    """Per-element upper bound on ``|quantized - raw|``.

    Rounding moves a value by at most ``resolution / 2``; every element that
    had to be pushed past its predecessor moves at most one jitter unit plus
    two float32 spacings beyond it. For isolated ties this is
    ``resolution / 2 + rank * (jitter_unit + 2 * spacing)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    step = jitter_unit(raw) + 2.0 * _float32_spacing(raw)
    upper = np.empty_like(raw)
    for i, r in enumerate(raw):
        upper[i] = r + resolution / 2 if i == 0 else max(r + resolution / 2, upper[i - 1] + step)
    return upper - raw + _float32_spacing(raw)


def quantize_timestamps(
    raw: Iterable[float],
    initial_resolution: float = 1.0,
    shrink_factor: float = 10.0,
    max_iterations: int = 8,
    return_resolution: bool = False,
):
    """Round timestamps to the coarsest resolution that keeps them distinct.

    The resolution starts at ``initial_resolution`` and is divided by
    ``shrink_factor`` until rounding yields a strictly increasing sequence.
    If ``max_iterations`` resolutions all leave ties, the finest rounding is
    kept and each collision is pushed one jitter unit past its predecessor
    (so the k-th of a tied run moves by k units). Finally the values are
    checked under a float32 cast and any collision there is moved to the
    next representable float32 value.
    """
    t = np.asarray(list(raw) if not isinstance(raw, np.ndarray) else raw, dtype=np.float64)
    if t.ndim != 1:
        raise SeriesError("timestamps must be one-dimensional")
    if not np.all(np.isfinite(t)):
        raise SeriesError("timestamps must be finite")
    if np.any(np.diff(t) < 0):
        bad = int(np.argmax(np.diff(t) < 0))
        raise SeriesError(f"timestamps decrease at index {bad + 1}")
    if initial_resolution <= 0 or shrink_factor <= 1 or max_iterations < 1:
        raise SeriesError("need initial_resolution > 0, shrink_factor > 1, max_iterations >= 1")

    q = t
    resolution = initial_resolution
    for k in range(max_iterations):
        # divide by an exact scale so decimal grids come out as 1.2, not 1.2000000000000002
        scale = shrink_factor**k / initial_resolution
        resolution = initial_resolution / shrink_factor**k
        q = np.round(t * scale) / scale
        if np.all(np.diff(q) > 0):
            break
    else:
        q = _push_apart(q, jitter_unit(t))

    out = _separate_float32(q)
    return (out, resolution) if return_resolution else out


def _push_apart(q: np.ndarray, unit: float) -> np.ndarray:
    out = q.copy()
    for i in range(1, out.size):
        if out[i] <= out[i - 1]:
            out[i] = out[i - 1] + unit
    return out


def _separate_float32(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    for i in range(1, out.size):
        prev32 = np.float32(out[i - 1])
        if np.float32(out[i]) <= prev32:
            out[i] = float(np.nextafter(prev32, np.float32(np.inf)))
    return out


# csv ------------------------------------------------------------------------------

CSV_HEADER = ("series_id", "timestamp", "value")


def _parse_value(text: str) -> float:
    text = text.strip()
    if text == "" or text == "NaN":
        return MISSING
    value = float(text)
    if math.isnan(value):
        return MISSING
    return value


def ingest_csv(path, quantize: bool = True, **quantize_kwargs) -> dict[str, IrregularSeries]:
    """Read ``series_id,timestamp,value`` rows into one series per id."""
    rows: dict[str, list[tuple[float, float, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise SeriesError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise SeriesError(f"{path}: line {line_no}: expected 3 fields, got {len(row)}")
            sid = row[0].strip()
            try:
                ts = float(row[1])
                val = _parse_value(row[2])
            except ValueError:
                raise SeriesError(f"{path}: line {line_no}: malformed row {row!r}") from None
            if not sid or not math.isfinite(ts) or ts < 0:
                raise SeriesError(f"{path}: line {line_no}: malformed row {row!r}")
            rows.setdefault(sid, []).append((ts, val, line_no))

    out = {}
    for sid, items in rows.items():
        items.sort(key=lambda r: (r[0], r[2]))
        for a, b in zip(items, items[1:]):
            if a[0] == b[0]:
                raise SeriesError(
                    f"{path}: duplicate timestamp {a[0]!r} for series {sid!r} "
                    f"on lines {a[2]} and {b[2]}"
                )
        ts = np.array([r[0] for r in items])
        vals = np.array([r[1] for r in items])
        if quantize:
            ts = quantize_timestamps(ts, **quantize_kwargs)
        out[sid] = IrregularSeries(sid, ts, vals)
    return out


def write_csv(path, series: Iterable[IrregularSeries] | Mapping[str, IrregularSeries]) -> None:
    if isinstance(series, Mapping):
        series = series.values()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in series:
            for t, v in zip(s.timestamps, s.values):
                writer.writerow([s.id, repr(float(t)), "" if math.isnan(v) else repr(float(v))])


# windows and scaling ------------------------------------------------------------

def make_windows(
    series: IrregularSeries, L: int, H: int, stride: int = 1, min_context: int = 1
) -> list[Window]:
    """Slide over observation indices; missing context points are dropped."""
    if L < 1 or H < 1 or stride < 1:
        raise SeriesError(f"need L, H, stride >= 1 (got {L}, {H}, {stride})")
    n = len(series)
    t, v = series.timestamps, series.values
    windows = []
    for start in range(0, n - L - H + 1, stride):
        ctx = slice(start, start + L)
        tgt = slice(start + L, start + L + H)
        keep = ~np.isnan(v[ctx])
        if keep.sum() < min_context:
            continue
        windows.append(
            Window(
                context_timestamps=t[ctx][keep],
                context_values=v[ctx][keep],
                target_timestamps=t[tgt].copy(),
                target_values=v[tgt].copy(),
                series_id=series.id,
            )
        )
    return windows


def normalize(window: Window) -> tuple[Window, NormStats]:
    ctx = window.context_values
    if ctx.size == 0:
        raise SeriesError("cannot normalize an empty context")
    stats = NormStats(float(ctx.mean()), max(float(ctx.std()), STD_FLOOR))
    scaled = Window(
        context_timestamps=window.context_timestamps,
        context_values=(ctx - stats.mean) / stats.std,
        target_timestamps=window.target_timestamps,
        target_values=(window.target_values - stats.mean) / stats.std,
        series_id=window.series_id,
    )
    return scaled, stats


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


# synthetic data -----------------------------------------------------------------

SYNTH_KINDS = ("sinusoid-mixture", "damped-oscillator", "piecewise-trend")
SAMPLING_MODES = ("regular-grid", "exponential-inter-arrival")


@dataclass
class SynthParams:
    points: int = 512
    sampling: str = "regular-grid"
    spacing: float = 1.0
    rate: float = 1.0
    noise: float = 0.0
    # sinusoid-mixture
    periods: tuple[float, ...] = (12.0, 31.0)
    amplitudes: tuple[float, ...] = (1.0, 0.5)
    # damped-oscillator
    amplitude: float = 1.0
    damping: float = 0.01
    omega: float = 0.5
    phase: float | None = None
    # piecewise-trend
    segments: int = 4
    extra: dict = field(default_factory=dict)


def sample_timestamps(params: SynthParams, rng: np.random.Generator) -> np.ndarray:
    if params.sampling == "regular-grid":
        return params.spacing * np.arange(params.points, dtype=np.float64)
    if params.sampling == "exponential-inter-arrival":
        gaps = rng.exponential(1.0 / params.rate, size=params.points)
        return quantize_timestamps(np.cumsum(gaps))
    raise SeriesError(f"unknown sampling mode {params.sampling!r}")


def damped_oscillator(t, amplitude, damping, omega, phase):
    return amplitude * np.exp(-damping * t) * np.sin(omega * t + phase)


def synth_generate(kind: str, params: SynthParams | None = None, seed: int = 0,
                   series_id: str | None = None) -> IrregularSeries:
    """Deterministic synthetic series of the given kind."""
    params = params or SynthParams()
    if kind not in SYNTH_KINDS:
        raise SeriesError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    t = sample_timestamps(params, rng)
    if kind == "sinusoid-mixture":
        phases = rng.uniform(0, 2 * np.pi, size=len(params.periods))
        x = np.zeros_like(t)
        for period, amp, ph in zip(params.periods, params.amplitudes, phases):
            x += amp * np.sin(2 * np.pi * t / period + ph)
    elif kind == "damped-oscillator":
        phase = rng.uniform(0, 2 * np.pi) if params.phase is None else params.phase
        x = damped_oscillator(t, params.amplitude, params.damping, params.omega, phase)
    else:
        knots = np.sort(rng.uniform(t[0], t[-1], size=max(params.segments - 1, 0)))
        slopes = rng.normal(0, 0.05, size=params.segments)
        x = np.zeros_like(t)
        level = rng.normal()
        edges = np.concatenate([[t[0]], knots, [t[-1] + 1.0]])
        for j in range(params.segments):
            sel = (t >= edges[j]) & (t < edges[j + 1])
            x[sel] = level + slopes[j] * (t[sel] - edges[j])
            level = level + slopes[j] * (edges[j + 1] - edges[j])
    if params.noise > 0:
        x = x + rng.normal(0, params.noise, size=x.shape)
    return IrregularSeries(series_id or f"{kind}-{seed}", t, x)


def mask_random(series: IrregularSeries, rate: float, seed: int = 0) -> IrregularSeries:
    """Blank exactly ``round(rate * N)`` values, chosen among the currently observed ones."""
    if not 0 <= rate < 1:
        raise SeriesError(f"mask rate must lie in [0, 1), got {rate}")
    n = len(series)
    count = int(round(rate * n))
    values = series.values.copy()
    observed = np.flatnonzero(~np.isnan(values))
    if count > observed.size:
        raise SeriesError(f"cannot mask {count} of {observed.size} observed values")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(observed, size=count, replace=False)
    values[chosen] = MISSING
    return IrregularSeries(series.id, series.timestamps, values)
