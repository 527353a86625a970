"""The decoder: point embedding, CT-RoPE attention + MoE blocks, ODE extrapolation, scalar head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import CTRoPEAttention, RMSNorm, glorot
from .moe import DenseFFN, MoELayer, RoutingStats, aux_loss
from .node import ODEBlock, SolverConfig
from .series import Window, denormalize, normalize


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    d_expert: int = 16
    experts: int = 4
    top_k: int = 2
    heads: int = 4
    huber_delta: float = 1.0
    aux_weight: float = 0.02
    max_seq_len: int = 512
    # ablation switches
    use_ctrope: bool = True
    use_moe: bool = True
    use_ode: bool = True
    ode_gradient: str = "adjoint"
    rtol: float = 1e-6
    atol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.experts:
            raise ValueError(f"need 1 <= top_k <= experts, got {self.top_k} and {self.experts}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if (self.d_model // self.heads) % 2:
            raise ValueError("head dimension must be even")
        if self.huber_delta <= 0 or self.aux_weight < 0:
            raise ValueError("need huber_delta > 0 and aux_weight >= 0")

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "tiny": ModelConfig(),
    "small": ModelConfig(layers=8, experts=8, top_k=2, d_model=288, d_ff=1152, d_expert=144, heads=8),
    "base": ModelConfig(layers=12, experts=8, top_k=2, d_model=384, d_ff=1536, d_expert=192, heads=8),
    "large": ModelConfig(layers=12, experts=8, top_k=2, d_model=768, d_ff=3072, d_expert=384, heads=12),
}


@dataclass
class ForecastRequest:
    context_timestamps: np.ndarray
    context_values: np.ndarray
    target_timestamps: np.ndarray

    def __post_init__(self):
        self.context_timestamps = np.asarray(self.context_timestamps, dtype=np.float64)
        self.context_values = np.asarray(self.context_values, dtype=np.float64)
        self.target_timestamps = np.asarray(self.target_timestamps, dtype=np.float64)
        if self.context_timestamps.size == 0:
            raise ValueError("forecast request has an empty context")
        if self.context_timestamps.shape != self.context_values.shape:
            raise ValueError("context timestamps and values differ in length")
        if np.any(np.diff(self.target_timestamps) <= 0):
            raise ValueError("target timestamps must be strictly increasing")
        if self.target_timestamps.size and self.target_timestamps[0] <= self.context_timestamps[-1]:
            raise ValueError("target timestamps must follow the last context timestamp")

    @classmethod
    def from_window(cls, w: Window) -> "ForecastRequest":
        return cls(w.context_timestamps, w.context_values, w.target_timestamps)


@dataclass
class LossBreakdown:
    total: ad.Tensor
    huber: float
    aux: float
    valid: int
    layer_stats: list[RoutingStats] = field(default_factory=list)


def pack(sequences: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Left-pad ``(timestamps, values)`` pairs into ``(B, T)`` arrays plus a validity mask."""
    T = max(len(t) for t, _ in sequences)
    B = len(sequences)
    times = np.zeros((B, T))
    values = np.zeros((B, T))
    valid = np.zeros((B, T), dtype=bool)
    for b, (t, x) in enumerate(sequences):
        n = len(t)
        times[b, T - n:] = t
        values[b, T - n:] = x
        valid[b, T - n:] = True
        if n < T:
            times[b, :T - n] = t[0]
    return times, values, valid


class DecoderBlock:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn_norm = RMSNorm(cfg.d_model)
        self.attn = CTRoPEAttention(cfg.d_model, cfg.heads, rng, use_time=cfg.use_ctrope)
        self.ffn_norm = RMSNorm(cfg.d_model)
        if cfg.use_moe:
            self.ffn = MoELayer(cfg.d_model, cfg.experts, cfg.top_k, cfg.d_expert, cfg.d_ff, rng)
        else:
            self.ffn = DenseFFN(cfg.d_model, cfg.d_ff + cfg.top_k * cfg.d_expert, rng)

    def parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for prefix, part in (("attn_norm", self.attn_norm), ("attn", self.attn),
                             ("ffn_norm", self.ffn_norm), ("ffn", self.ffn)):
            out.update({f"{prefix}.{k}": v for k, v in part.parameters().items()})
        return out

    def __call__(self, x: ad.Tensor, times, valid, fixed_selection=None):
        B, T, d = x.shape
        x = x + self.attn(self.attn_norm(x), times, valid)
        flat = ad.reshape(self.ffn_norm(x), (B * T, d))
        rows = np.flatnonzero(valid.reshape(-1))
        out, stats = self.ffn(flat[rows], fixed_selection)
        x = x + ad.reshape(ad.scatter_rows(out, rows, B * T), (B, T, d))
        return x, stats


class MiraModel:
    """Decoder-only forecaster over ``(timestamp, value)`` tokens."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.embed_weight = ad.tensor(rng.normal(size=cfg.d_model), requires_grad=True)
        self.embed_bias = ad.tensor(rng.normal(size=cfg.d_model), requires_grad=True)
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.layers)]
        self.final_norm = RMSNorm(cfg.d_model)
        self.ode = ODEBlock(cfg.d_model, rng, cfg.solver, gradient=cfg.ode_gradient)
        self.head = ad.tensor(glorot(rng, cfg.d_model, 1).reshape(-1), requires_grad=True)

    # parameters -------------------------------------------------------------

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {"embed.weight": self.embed_weight, "embed.bias": self.embed_bias}
        for i, block in enumerate(self.blocks):
            params.update({f"layers.{i}.{k}": v for k, v in block.parameters().items()})
        params.update({f"final_norm.{k}": v for k, v in self.final_norm.parameters().items()})
        params.update({f"ode.{k}": v for k, v in self.ode.parameters().items()})
        params["head.weight"] = self.head
        for name, p in params.items():
            p.name = name
        return params

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def active_parameter_count(self) -> int:
        cfg = self.config
        total = self.parameter_count()
        if cfg.use_moe:
            inactive = cfg.layers * (cfg.experts - cfg.top_k) * 2 * cfg.d_model * cfg.d_expert
            total -= inactive
        return total

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr

    # forward ------------------------------------------------------------------

    def embed(self, values) -> ad.Tensor:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding input must be finite")
        return ad.mul(values[..., None], self.embed_weight) + self.embed_bias

    def forward(self, times, values, valid=None, fixed_selection=None):
        """Latents ``(B, T, d_model)`` after the final norm, and per-layer routing stats.

        Accepts a single sequence as 1-D ``times``/``values`` too.
        """
        times = np.asarray(times, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        single = times.ndim == 1
        if single:
            times, values = times[None], values[None]
        if valid is None:
            valid = np.ones(times.shape, dtype=bool)
        if times.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {times.shape[1]} exceeds max {self.config.max_seq_len}")
        x = self.embed(np.where(valid, values, 0.0))
        stats = []
        for i, block in enumerate(self.blocks):
            sel = None if fixed_selection is None else fixed_selection[i]
            x, st = block(x, times, valid, sel)
            stats.append(st)
        latents = self.final_norm(x)
        if single:
            latents = ad.reshape(latents, latents.shape[1:])
        return latents, stats

    def extrapolate(self, h: ad.Tensor, gaps: np.ndarray) -> ad.Tensor:
        if not self.config.use_ode:
            return h
        return self.ode(h, gaps)

    def decode(self, h: ad.Tensor) -> ad.Tensor:
        return ad.matmul(h, self.head)

    # training objective -------------------------------------------------------

    def teacher_forced(self, windows: Sequence[Window], fixed_selection=None):
        """Predictions for every observed target of already-normalized windows.

        Observed targets are appended as input tokens; each target is predicted
        from the latent of the last observed token before it, extrapolated over
        the gap between the two timestamps.
        """
        seqs, sources, gaps, targets = [], [], [], []
        for w in windows:
            obs = w.target_mask
            t = np.concatenate([w.context_timestamps, w.target_timestamps[obs]])
            x = np.concatenate([w.context_values, w.target_values[obs]])
            seqs.append((t, x))
        times, values, valid = pack(seqs)
        T = times.shape[1]
        for b, w in enumerate(windows):
            n_tokens = int(valid[b].sum())
            offset = T - n_tokens
            last = len(w.context_timestamps) - 1
            for j, (tj, xj) in enumerate(zip(w.target_timestamps, w.target_values)):
                if np.isnan(xj):
                    continue
                sources.append((b, offset + last))
                gaps.append(tj - times[b, offset + last])
                targets.append(xj)
                last += 1
        latents, stats = self.forward(times, values, valid, fixed_selection)
        if not sources:
            raise ValueError("no observed targets in batch")
        src = np.array(sources)
        h = latents[src[:, 0], src[:, 1]]
        preds = self.decode(self.extrapolate(h, np.array(gaps)))
        return preds, np.array(targets), stats

    def loss(self, windows: Sequence[Window], fixed_selection=None) -> LossBreakdown:
        preds, targets, stats = self.teacher_forced(windows, fixed_selection)
        return objective(preds, targets, stats, self.config)

    def free_running_loss(self, windows: Sequence[Window]) -> LossBreakdown:
        """Objective on the model's own rollout; fed-back predictions are not differentiated."""
        H = len(windows[0].target_timestamps)
        seqs = [(w.context_timestamps.copy(), w.context_values.copy()) for w in windows]
        preds, targets, all_stats = [], [], []
        for j in range(H):
            times, values, valid = pack(seqs)
            latents, stats = self.forward(times, values, valid)
            all_stats.append(stats)
            gaps = np.array([w.target_timestamps[j] - s[0][-1] for w, s in zip(windows, seqs)])
            p = self.decode(self.extrapolate(latents[:, -1], gaps))
            keep = np.flatnonzero([w.target_mask[j] for w in windows])
            if keep.size:
                preds.append(p[keep])
                targets.append(np.array([windows[b].target_values[j] for b in keep]))
            seqs = [(np.append(t, w.target_timestamps[j]), np.append(x, p.data[b]))
                    for b, ((t, x), w) in enumerate(zip(seqs, windows))]
        merged = [all_stats[j] for j in range(H)]
        per_layer = [[m[l] for m in merged] for l in range(len(self.blocks))]
        stats = [_pool_tensor_stats(s) for s in per_layer]
        return objective(ad.concat(preds), np.concatenate(targets), stats, self.config)

    # inference ------------------------------------------------------------------

    def forecast_normalized(self, requests: Sequence[ForecastRequest]) -> list[np.ndarray]:
        """Autoregressive rollout in the (already normalized) value space of each request."""
        out: list[np.ndarray] = [np.zeros(0) for _ in requests]
        by_h: dict[int, list[int]] = {}
        for i, r in enumerate(requests):
            by_h.setdefault(len(r.target_timestamps), []).append(i)
        with ad.no_grad():
            for H, idx in by_h.items():
                seqs = [(requests[i].context_timestamps.copy(), requests[i].context_values.copy())
                        for i in idx]
                preds = np.zeros((len(idx), H))
                for j in range(H):
                    times, values, valid = pack(seqs)
                    if times.shape[1] > self.config.max_seq_len:
                        times, values, valid = (a[:, -self.config.max_seq_len:]
                                                for a in (times, values, valid))
                    latents, _ = self.forward(times, values, valid)
                    targets = np.array([requests[i].target_timestamps[j] for i in idx])
                    gaps = targets - times[:, -1]
                    p = self.decode(self.extrapolate(latents[:, -1], gaps)).data
                    preds[:, j] = p
                    seqs = [(np.append(t, tj), np.append(x, pj))
                            for (t, x), tj, pj in zip(seqs, targets, p)]
                for k, i in enumerate(idx):
                    out[i] = preds[k]
        return out

    def forecast(self, requests: Sequence[ForecastRequest] | ForecastRequest):
        """Forecast in original units; context statistics set the scale of each request."""
        single = isinstance(requests, ForecastRequest)
        reqs = [requests] if single else list(requests)
        scaled, stats = [], []
        for r in reqs:
            w, st = normalize(Window(r.context_timestamps, r.context_values,
                                     r.target_timestamps, np.full(r.target_timestamps.shape, np.nan)))
            scaled.append(ForecastRequest(w.context_timestamps, w.context_values, w.target_timestamps))
            stats.append(st)
        preds = [denormalize(p, st) for p, st in zip(self.forecast_normalized(scaled), stats)]
        return preds[0] if single else preds


def _pool_tensor_stats(stats: Sequence[RoutingStats]) -> RoutingStats:
    total = sum(s.tokens for s in stats)
    f = sum(s.fractions * s.tokens for s in stats) / total
    r = None
    for s in stats:
        term = ad.affine(s.mean_scores, s.tokens / total)
        r = term if r is None else r + term
    return RoutingStats(f, r, total)


def objective(preds: ad.Tensor, targets: np.ndarray, stats: Sequence[RoutingStats | None],
              config: ModelConfig) -> LossBreakdown:
    """Mean Huber over observed targets plus the weighted mean balancing loss over layers."""
    targets = np.asarray(targets, dtype=np.float64)
    mask = ~np.isnan(targets)
    if not mask.any():
        raise ValueError("no valid targets for the loss")
    if preds.shape != targets.shape:
        raise ValueError(f"predictions {preds.shape} and targets {targets.shape} differ")
    idx = np.flatnonzero(mask)
    residual = preds[idx] - targets[idx]
    huber = ad.mean(ad.huber(residual, config.huber_delta))
    routed = [s for s in stats if s is not None]
    total = huber
    aux_value = 0.0
    if routed and config.aux_weight > 0:
        aux_terms = [aux_loss(s) for s in routed]
        aux = aux_terms[0]
        for term in aux_terms[1:]:
            aux = aux + term
        aux = ad.affine(aux, 1.0 / len(aux_terms))
        aux_value = aux.item()
        total = huber + ad.affine(aux, config.aux_weight)
    elif routed:
        aux_value = float(np.mean([aux_loss(s).item() for s in routed]))
    return LossBreakdown(total, huber.item(), aux_value, int(idx.size), list(stats))
