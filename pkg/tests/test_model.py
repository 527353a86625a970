import numpy as np
import pytest

from mira import autodiff as ad
from mira.harness import TrainConfig, train, training_windows
from mira.model import PRESETS, ForecastRequest, MiraModel, ModelConfig, objective, pack
from mira.moe import RoutingStats
from mira.series import SynthParams, Window, make_windows, normalize, synth_generate

EXP = SynthParams(points=160, sampling="exponential-inter-arrival", rate=1.0)


def windows(L=8, H=2, n=3, seed=1, stride=8):
    s = synth_generate("sinusoid-mixture", EXP, seed=seed)
    return [normalize(w)[0] for w in make_windows(s, L, H, stride)][:n]


def request(seed=0, L=10, H=4):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.2, 2.0, size=L + H))
    x = np.sin(t) + rng.normal(scale=0.1, size=L + H)
    return ForecastRequest(t[:L], x[:L], t[L:])


def with_random_dynamics(model, scale=0.3, seed=0):
    w2 = model.ode.dynamics.w2
    w2.data[:] = np.random.default_rng(seed).normal(scale=scale, size=w2.shape)
    return model


# configuration -----------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [{"top_k": 5, "experts": 4}, {"heads": 5}, {"d_model": 36, "heads": 4},
                                    {"huber_delta": 0.0}, {"aux_weight": -1.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_presets_construct_their_configs():
    small = PRESETS["small"]
    assert (small.layers, small.experts, small.top_k, small.d_model, small.d_ff, small.d_expert) == \
        (8, 8, 2, 288, 1152, 144)
    assert (PRESETS["base"].layers, PRESETS["base"].d_model) == (12, 384)
    assert (PRESETS["large"].d_model, PRESETS["large"].d_ff) == (768, 3072)


def test_parameter_count_of_tiny_config():
    cfg = ModelConfig()
    d, ff, de, n = cfg.d_model, cfg.d_ff, cfg.d_expert, cfg.experts
    per_layer = (4 * d * d + 3 * d) + 2 * d + (d * n + d) + n * 2 * d * de + 2 * d * ff
    expected = 2 * d + cfg.layers * per_layer + d + (d + 1) * d + d * d + d
    model = MiraModel(cfg)
    assert model.parameter_count() == expected
    assert model.active_parameter_count() == expected - cfg.layers * (n - cfg.top_k) * 2 * d * de


def test_no_bias_outside_qkv():
    names = MiraModel().parameters()
    biases = sorted(k for k in names if k.endswith(("bq", "bk", "bv")) or "bias" in k)
    assert all(k.endswith(("bq", "bk", "bv")) for k in biases if k != "embed.bias")


def test_ablation_variants_swap_components():
    dense = MiraModel(ModelConfig(use_moe=False))
    ffn = dense.blocks[0].ffn.ffn
    cfg = dense.config
    assert ffn.w1.shape == (cfg.d_model, cfg.d_ff + cfg.top_k * cfg.d_expert)
    plain = MiraModel(ModelConfig(use_ode=False))
    h = ad.tensor(np.ones((2, 32)))
    assert plain.extrapolate(h, np.array([1.0, 5.0])) is h


# embedding -----------------------------------------------------------------------------

def test_zero_embedding():
    m = MiraModel()
    m.embed_weight.data[:] = 0
    m.embed_bias.data[:] = 0
    assert np.array_equal(m.embed(np.array([3.0])).data, np.zeros((1, 32)))


def test_embedding_is_affine():
    m = MiraModel()
    a, b = 1.3, -0.4
    lhs = m.embed(np.array(a)).data + m.embed(np.array(b)).data - m.embed(np.array(0.0)).data
    np.testing.assert_allclose(lhs, m.embed(np.array(a + b)).data, rtol=1e-14, atol=1e-14)


def test_embedding_gradient():
    m = MiraModel()
    r = np.random.default_rng(0).normal(size=(3, 32))
    f = lambda: ad.sum(m.embed(np.array([0.5, -1.0, 2.0])) * r)
    assert ad.finite_difference_check(f, [m.embed_weight, m.embed_bias]) < 1e-6


def test_embedding_rejects_missing_values():
    with pytest.raises(ValueError, match="finite"):
        MiraModel().embed(np.array([1.0, np.nan]))


# forward --------------------------------------------------------------------------------

def test_zero_residual_branches_leave_normalized_embeddings():
    m = MiraModel(ModelConfig(layers=1))
    block = m.blocks[0]
    block.attn.wo.data[:] = 0
    block.ffn.shared.w2.data[:] = 0
    for e in block.ffn.experts:
        e.w2.data[:] = 0
    t, x = np.arange(5.0), np.linspace(-1, 1, 5)
    latents, _ = m.forward(t, x)
    emb = m.embed(x).data
    expected = emb / np.sqrt(np.mean(emb**2, axis=-1, keepdims=True))
    np.testing.assert_allclose(latents.data, expected, rtol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_forward_is_causal(seed):
    rng = np.random.default_rng(seed)
    m = MiraModel(ModelConfig(seed=seed))
    t = np.cumsum(rng.uniform(0.1, 2, size=9))
    x = rng.normal(size=9)
    j = int(rng.integers(1, 9))
    y = x.copy()
    y[j] += 1.0
    a, b = m.forward(t, x)[0].data, m.forward(t, y)[0].data
    assert np.array_equal(a[:j], b[:j])


def test_forward_shift_invariance():
    rng = np.random.default_rng(3)
    m = MiraModel()
    t = np.cumsum(rng.uniform(0.1, 2, size=12))
    x = rng.normal(size=12)
    np.testing.assert_allclose(m.forward(t, x)[0].data, m.forward(t + 100.0, x)[0].data,
                               rtol=0, atol=1e-10)


def test_forward_rejects_over_length():
    m = MiraModel(ModelConfig(max_seq_len=4))
    with pytest.raises(ValueError, match="exceeds"):
        m.forward(np.arange(5.0), np.zeros(5))


def test_batched_forward_matches_single_sequences():
    rng = np.random.default_rng(4)
    m = MiraModel()
    seqs = [(np.cumsum(rng.uniform(0.1, 2, size=n)), rng.normal(size=n)) for n in (3, 7, 5)]
    times, values, valid = pack(seqs)
    latents, _ = m.forward(times, values, valid)
    for b, (t, x) in enumerate(seqs):
        single, _ = m.forward(t, x)
        np.testing.assert_allclose(latents.data[b, -len(t):], single.data, rtol=0, atol=1e-12)


# forecasting --------------------------------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError, match="follow"):
        ForecastRequest([0.0, 1.0], [1.0, 2.0], [0.5])
    with pytest.raises(ValueError, match="increasing"):
        ForecastRequest([0.0, 1.0], [1.0, 2.0], [3.0, 2.0])
    with pytest.raises(ValueError, match="empty"):
        ForecastRequest([], [], [1.0])


def test_empty_horizon():
    r = request(H=0)
    assert MiraModel().forecast(r).shape == (0,)


def test_zero_flow_constant_context_continues_constant():
    m = MiraModel()
    m.embed_bias.data[:] = 0.0
    r = ForecastRequest(np.arange(6.0), np.full(6, 4.2), np.arange(6.0, 11.0))
    np.testing.assert_allclose(m.forecast(r), 4.2, rtol=1e-14)


def test_forecast_shape_and_determinism():
    m = with_random_dynamics(MiraModel())
    reqs = [request(0, H=3), request(1, L=6, H=3), request(2, H=5)]
    a = m.forecast(reqs)
    b = m.forecast(reqs)
    assert [len(p) for p in a] == [3, 3, 5]
    assert all(np.all(np.isfinite(p)) for p in a)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_batched_forecast_matches_individual():
    # rows share one adaptive step sequence, so agreement is at solver tolerance
    m = with_random_dynamics(MiraModel())
    reqs = [request(0, H=3), request(1, L=6, H=3)]
    together = m.forecast(reqs)
    for r, p in zip(reqs, together):
        np.testing.assert_allclose(m.forecast(r), p, rtol=0, atol=10 * m.config.atol)


def test_forecast_shift_invariance():
    m = with_random_dynamics(MiraModel())
    r = request(3, H=4)
    shifted = ForecastRequest(r.context_timestamps + 250.0, r.context_values, r.target_timestamps + 250.0)
    np.testing.assert_allclose(m.forecast(r), m.forecast(shifted), rtol=0, atol=1e-8)


def test_first_teacher_forced_prediction_matches_forecast():
    m = with_random_dynamics(MiraModel())
    w = windows(L=8, H=3, n=1)[0]
    preds, _, _ = m.teacher_forced([w])
    fc = m.forecast_normalized([ForecastRequest.from_window(w)])[0]
    assert preds.data[0] == pytest.approx(fc[0], abs=1e-12)


def test_trained_model_forecast():
    s = [synth_generate("sinusoid-mixture", EXP, seed=i) for i in range(2)]
    m, _ = train(MiraModel(), training_windows(s, 16, 4, stride=8), TrainConfig(steps=5, batch_size=4))
    out = m.forecast(request(4, L=12, H=3))
    assert out.shape == (3,) and np.all(np.isfinite(out))
    assert np.array_equal(out, m.forecast(request(4, L=12, H=3)))


# objective ---------------------------------------------------------------------------

def no_routing():
    return [None]


def test_perfect_prediction_has_zero_huber():
    lb = objective(ad.tensor([1.0, 2.0]), np.array([1.0, 2.0]), no_routing(), ModelConfig())
    assert lb.huber == 0.0 and lb.total.item() == 0.0


def test_huber_mean_example():
    lb = objective(ad.tensor([0.5, 2.0]), np.array([0.0, 0.0]), no_routing(), ModelConfig())
    assert lb.huber == 0.8125


def test_missing_targets_excluded():
    lb = objective(ad.tensor([0.5, 99.0, 2.0]), np.array([0.0, np.nan, 0.0]), no_routing(), ModelConfig())
    assert lb.huber == 0.8125 and lb.valid == 2


def test_all_missing_targets_rejected():
    with pytest.raises(ValueError, match="no valid targets"):
        objective(ad.tensor([0.5]), np.array([np.nan]), no_routing(), ModelConfig())


def test_uniform_routing_aux_contribution():
    uniform = RoutingStats(np.full(4, 0.25), ad.tensor(np.full(4, 0.25)), 8)
    lb = objective(ad.tensor([0.0]), np.array([0.0]), [uniform, uniform], ModelConfig(aux_weight=0.02))
    assert lb.aux == pytest.approx(1.0, abs=1e-12)
    assert lb.total.item() == pytest.approx(0.02, abs=1e-14)


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_huber_is_continuously_differentiable_at_threshold(delta):
    values, slopes = [], []
    for r in (delta - 1e-9, delta + 1e-9):
        t = ad.tensor(r, requires_grad=True)
        out = ad.huber(t, delta)
        values.append(out.item())
        slopes.append(ad.backward(out).of(t))
    assert abs(values[0] - values[1]) < 1e-8
    assert abs(slopes[0] - slopes[1]) < 1e-8


def test_loss_components_reported():
    m = MiraModel()
    lb = m.loss(windows())
    assert lb.total.item() == pytest.approx(lb.huber + 0.02 * lb.aux, rel=1e-12)
    assert len(lb.layer_stats) == 2 and lb.valid == 6


# gradients -------------------------------------------------------------------------------

def test_end_to_end_gradient_on_sampled_coordinates():
    m = with_random_dynamics(MiraModel(ModelConfig(rtol=1e-12, atol=1e-12)))
    ws = windows(L=8, H=2, n=2)
    selection = [s.selected for s in m.loss(ws).layer_stats]
    params = list(m.parameters().values())
    err = ad.finite_difference_check(lambda: m.loss(ws, selection).total, params, coords_per_param=2)
    assert err < 1e-4


def test_direct_and_adjoint_model_gradients_agree():
    grads = []
    for mode in ("adjoint", "direct"):
        m = with_random_dynamics(MiraModel(ModelConfig(ode_gradient=mode)))
        params = m.parameters()
        g = ad.backward(m.loss(windows()).total)
        grads.append({k: g.of(p) for k, p in params.items()})
    for k in grads[0]:
        scale = max(np.max(np.abs(grads[1][k])), 1e-12)
        assert np.max(np.abs(grads[0][k] - grads[1][k])) / scale < 1e-3, k


def test_free_running_loss_runs_and_differs_from_teacher_forcing():
    m = with_random_dynamics(MiraModel())
    ws = windows(L=8, H=3)
    free, forced = m.free_running_loss(ws), m.loss(ws)
    assert np.isfinite(free.total.item()) and free.valid == forced.valid
    assert free.total.item() != forced.total.item()
    assert ad.backward(free.total)


# state ------------------------------------------------------------------------------------

def test_state_dict_round_trip():
    a = with_random_dynamics(MiraModel(ModelConfig(seed=1)))
    b = MiraModel(ModelConfig(seed=2))
    b.load_state_dict(a.state_dict())
    r = request(5)
    assert np.array_equal(a.forecast(r), b.forecast(r))


def test_load_state_dict_rejects_mismatch():
    state = MiraModel().state_dict()
    state.pop("head.weight")
    with pytest.raises(KeyError, match="head.weight"):
        MiraModel().load_state_dict(state)
    state = MiraModel().state_dict()
    state["head.weight"] = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        MiraModel().load_state_dict(state)


def test_window_type_round_trip():
    w = windows(n=1)[0]
    assert isinstance(w, Window)
    assert ForecastRequest.from_window(w).target_timestamps.tolist() == w.target_timestamps.tolist()
