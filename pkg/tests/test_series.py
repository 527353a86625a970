import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mira.series import (
    STD_FLOOR,
    IrregularSeries,
    NormStats,
    SeriesError,
    SynthParams,
    Window,
    damped_oscillator,
    denormalize,
    ingest_csv,
    jitter_unit,
    make_windows,
    mask_random,
    normalize,
    quantization_bound,
    quantize_timestamps,
    synth_generate,
    write_csv,
)


def write_text(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# data model ------------------------------------------------------------------------

def test_series_rejects_non_increasing_timestamps():
    with pytest.raises(SeriesError, match="strictly increasing"):
        IrregularSeries("a", [0.0, 1.0, 1.0], [1.0, 2.0, 3.0])


def test_series_rejects_length_mismatch():
    with pytest.raises(SeriesError):
        IrregularSeries("a", [0.0, 1.0], [1.0])


def test_series_equality_treats_missing_as_equal():
    a = IrregularSeries("a", [0.0, 1.0], [1.0, np.nan])
    b = IrregularSeries("a", [0.0, 1.0], [1.0, np.nan])
    assert a == b
    assert a != IrregularSeries("b", [0.0, 1.0], [1.0, np.nan])


def test_series_arrays_are_read_only():
    s = IrregularSeries("a", [0.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        s.values[0] = 5.0


def test_window_rejects_missing_context():
    with pytest.raises(SeriesError):
        Window(np.array([0.0]), np.array([np.nan]), np.array([1.0]), np.array([1.0]))


# quantization ------------------------------------------------------------------------

def test_quantize_grid_values_unchanged():
    assert quantize_timestamps([1.0, 2.0, 3.0]).tolist() == [1.0, 2.0, 3.0]


def test_quantize_refines_until_unique():
    out, res = quantize_timestamps([1.23, 1.27], return_resolution=True)
    assert out.tolist() == [1.2, 1.3]
    assert res == 0.1


def test_quantize_fallback_on_exact_duplicates():
    raw = np.array([0.5, 0.5, 0.7])
    out = quantize_timestamps(raw)
    assert np.all(np.diff(out) > 0)
    assert np.all(np.diff(out.astype(np.float32)) > 0)
    # the first copy sits on the finest grid, the tie is pushed one jitter unit above it
    assert out[0] == 0.5
    assert out[1] == pytest.approx(0.5 + jitter_unit(raw), abs=1e-15)
    assert out[2] == pytest.approx(0.7, abs=1e-15)
    assert np.all(np.abs(out - raw) <= quantization_bound(raw, 1e-7))


@pytest.mark.parametrize("raw", [[1.0, 0.5], [0.0, np.nan], [np.inf]])
def test_quantize_rejects_bad_input(raw):
    with pytest.raises(SeriesError):
        quantize_timestamps(raw)


def _sorted_with_duplicates(draw_values, dup_indices):
    raw = np.sort(np.asarray(draw_values, dtype=np.float64))
    for i in dup_indices:
        if 0 < i < raw.size:
            raw[i] = raw[i - 1]
    return raw


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=40),
    st.lists(st.integers(0, 39), max_size=10),
)
def test_quantize_properties(values, dups):
    raw = _sorted_with_duplicates(values, dups)
    out, res = quantize_timestamps(raw, return_resolution=True)
    assert out.shape == raw.shape
    assert np.all(np.diff(out) > 0)
    assert np.all(np.diff(out.astype(np.float32)) > 0)
    strictly = np.diff(raw) > 0
    assert np.all(np.diff(out)[strictly] > 0)
    assert np.all(np.abs(out - raw) <= quantization_bound(raw, res))


def test_quantize_is_idempotent_on_its_own_output():
    raw = np.cumsum(np.random.default_rng(0).exponential(0.37, size=200))
    once = quantize_timestamps(raw)
    assert np.array_equal(quantize_timestamps(once), once)


# csv ------------------------------------------------------------------------------

def test_ingest_two_series_sorted(tmp_path):
    path = write_text(tmp_path, "series_id,timestamp,value\n"
                                "b,3,1.5\na,2,0.1\na,1,0.2\nb,1,2.5\na,3,0.3\nb,2,NaN\n")
    data = ingest_csv(path)
    assert sorted(data) == ["a", "b"]
    assert data["a"].timestamps.tolist() == [1.0, 2.0, 3.0]
    assert data["a"].values.tolist() == [0.2, 0.1, 0.3]
    assert np.isnan(data["b"].values[1])


def test_ingest_empty_field_is_missing(tmp_path):
    path = write_text(tmp_path, "series_id,timestamp,value\na,0,1\na,1,\na,2,3\n")
    assert np.isnan(ingest_csv(path)["a"].values).tolist() == [False, True, False]


def test_ingest_reports_line_of_malformed_row(tmp_path):
    path = write_text(tmp_path, "series_id,timestamp,value\na,0,1\na,x,3\n")
    with pytest.raises(SeriesError, match="line 3"):
        ingest_csv(path)


def test_ingest_reports_both_duplicate_lines(tmp_path):
    path = write_text(tmp_path, "series_id,timestamp,value\na,0,1\nb,0,1\na,0,2\n")
    with pytest.raises(SeriesError, match="lines 2 and 4"):
        ingest_csv(path)


def test_ingest_rejects_bad_header(tmp_path):
    path = write_text(tmp_path, "id,t,v\na,0,1\n")
    with pytest.raises(SeriesError, match="header"):
        ingest_csv(path)


@pytest.mark.parametrize("kind", ["sinusoid-mixture", "damped-oscillator", "piecewise-trend"])
@pytest.mark.parametrize("sampling", ["regular-grid", "exponential-inter-arrival"])
def test_csv_round_trip(tmp_path, kind, sampling):
    series = [mask_random(synth_generate(kind, SynthParams(points=64, sampling=sampling), seed=s),
                          0.2, seed=s) for s in range(3)]
    path = tmp_path / "rt.csv"
    write_csv(path, series)
    back = ingest_csv(path)
    assert [back[s.id] for s in series] == series
    write_csv(tmp_path / "rt2.csv", back)
    assert (tmp_path / "rt2.csv").read_bytes() == path.read_bytes()


# windows and scaling ---------------------------------------------------------------

def test_window_count():
    s = IrregularSeries("a", np.arange(10.0), np.arange(10.0))
    assert len(make_windows(s, 4, 2, stride=4)) == 2


def test_full_series_gives_full_context():
    s = IrregularSeries("a", np.arange(20.0), np.ones(20))
    assert all(len(w.context_values) == 5 for w in make_windows(s, 5, 3))


def test_short_series_gives_no_windows():
    s = IrregularSeries("a", np.arange(5.0), np.ones(5))
    assert make_windows(s, 4, 2) == []


def test_windows_never_carry_missing_context():
    s = mask_random(synth_generate("sinusoid-mixture", SynthParams(points=300), seed=1), 0.3, seed=2)
    windows = make_windows(s, 16, 4, stride=1)
    assert windows
    for w in windows:
        assert not np.any(np.isnan(w.context_values))
        assert len(w.target_timestamps) == 4
        assert w.context_timestamps[-1] < w.target_timestamps[0]
        assert set(w.context_timestamps) <= set(s.timestamps)


def test_min_context_discards_sparse_windows():
    values = np.ones(10)
    values[:4] = np.nan
    s = IrregularSeries("a", np.arange(10.0), values)
    assert len(make_windows(s, 4, 1, min_context=1)) == 5
    assert len(make_windows(s, 4, 1, min_context=4)) == 2


@pytest.mark.parametrize("L, H, stride", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
def test_make_windows_rejects_bad_sizes(L, H, stride):
    with pytest.raises(SeriesError):
        make_windows(IrregularSeries("a", [0.0], [1.0]), L, H, stride)


def _window(ctx, tgt=(0.0,)):
    n = len(ctx)
    return Window(np.arange(n, dtype=float), np.array(ctx, dtype=float),
                  np.arange(n, n + len(tgt), dtype=float), np.array(tgt, dtype=float))


def test_normalize_constant_context_uses_floor():
    w, stats = normalize(_window([2.0, 2.0, 2.0]))
    assert w.context_values.tolist() == [0.0, 0.0, 0.0]
    assert stats == NormStats(2.0, STD_FLOOR)


def test_normalize_two_points():
    w, stats = normalize(_window([0.0, 2.0], tgt=[5.0]))
    assert (stats.mean, stats.std) == (1.0, 1.0)
    assert w.context_values.tolist() == [-1.0, 1.0]
    assert w.target_values.tolist() == [4.0]


def test_normalize_ignores_targets():
    _, a = normalize(_window([1.0, 3.0, 4.0], tgt=[100.0]))
    _, b = normalize(_window([1.0, 3.0, 4.0], tgt=[-7.0]))
    assert a == b


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_normalize_round_trip(values):
    w, stats = normalize(_window(values))
    back = denormalize(w.context_values, stats)
    scale = max(1.0, np.max(np.abs(values)))
    np.testing.assert_allclose(back, values, rtol=0, atol=1e-12 * scale)
    if stats.std > STD_FLOOR:
        assert abs(np.mean(w.context_values)) < 1e-9
        assert abs(np.std(w.context_values) - 1.0) < 1e-9


# synthetic data ----------------------------------------------------------------------

def test_regular_grid_has_constant_spacing():
    s = synth_generate("sinusoid-mixture", SynthParams(points=512), seed=0)
    assert len(s) == 512
    assert np.all(np.diff(s.timestamps) == 1.0)


def test_exponential_sampling_is_deterministic_and_irregular():
    p = SynthParams(points=300, sampling="exponential-inter-arrival", rate=1.0)
    a, b = synth_generate("sinusoid-mixture", p, seed=5), synth_generate("sinusoid-mixture", p, seed=5)
    assert a == b
    gaps = np.diff(a.timestamps)
    assert np.all(gaps > 0)
    # exponential gaps with rate 1 have variance 1; quantization to 0.01 barely changes it
    assert 0.6 < gaps.var() < 1.6


def test_damped_oscillator_matches_closed_form():
    p = SynthParams(points=200, sampling="exponential-inter-arrival", amplitude=1.7, damping=0.03,
                    omega=0.8, phase=0.4)
    s = synth_generate("damped-oscillator", p, seed=3)
    t = s.timestamps
    expected = 1.7 * np.exp(-0.03 * t) * np.sin(0.8 * t + 0.4)
    np.testing.assert_allclose(s.values, expected, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(damped_oscillator(t, 1.7, 0.03, 0.8, 0.4), s.values)


def test_unknown_kind_rejected():
    with pytest.raises(SeriesError, match="unknown"):
        synth_generate("square-wave")


def test_piecewise_trend_is_continuous_without_noise():
    s = synth_generate("piecewise-trend", SynthParams(points=400, segments=5), seed=4)
    assert np.max(np.abs(np.diff(s.values))) < 0.2


# masking ---------------------------------------------------------------------------

def test_mask_rate_zero_is_identity():
    s = synth_generate("sinusoid-mixture", SynthParams(points=50), seed=0)
    assert mask_random(s, 0.0, seed=1) == s


def test_mask_thirty_percent_of_hundred():
    s = synth_generate("sinusoid-mixture", SynthParams(points=100), seed=0)
    m = mask_random(s, 0.3, seed=1)
    assert int(np.isnan(m.values).sum()) == 30
    assert np.array_equal(m.timestamps, s.timestamps)


def test_mask_seeds_differ_but_count_agrees():
    s = synth_generate("sinusoid-mixture", SynthParams(points=100), seed=0)
    a, b = mask_random(s, 0.3, seed=1), mask_random(s, 0.3, seed=2)
    assert a.missing.sum() == b.missing.sum() == 30
    assert set(np.flatnonzero(a.missing)) != set(np.flatnonzero(b.missing))
    assert mask_random(s, 0.3, seed=1) == a


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_mask_rejects_bad_rate(rate):
    with pytest.raises(SeriesError):
        mask_random(synth_generate("sinusoid-mixture", SynthParams(points=10)), rate)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.45), st.floats(0, 0.45), st.integers(0, 1000))
def test_mask_composition_never_resurrects(r1, r2, seed):
    s = synth_generate("sinusoid-mixture", SynthParams(points=80), seed=seed)
    first = mask_random(s, r1, seed=seed)
    second = mask_random(first, r2, seed=seed + 1)
    assert np.all(second.missing[first.missing])
    assert second.missing.sum() == round(r1 * 80) + round(r2 * 80)
    kept = ~second.missing
    assert np.array_equal(second.values[kept], s.values[kept])
    assert math.isfinite(float(np.nansum(second.values)))
