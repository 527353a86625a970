"""Sparse mixture-of-experts feed-forward layer with an always-on shared expert."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .attention import glorot


@dataclass
class MoEGates:
    scores: np.ndarray        # (T, N) softmax over routed experts
    gates: np.ndarray         # (T, N) scores on the top-K, exactly zero elsewhere
    shared: np.ndarray        # (T,) sigmoid gate of the shared expert
    selected: np.ndarray      # (T, K) expert indices, best first


@dataclass
class RoutingStats:
    """Per-expert selection fraction ``f`` and mean score ``r`` over ``tokens`` tokens.

    ``mean_scores`` keeps the differentiable tensor behind ``r`` so the
    balancing loss can push gradients into the router.
    """

    fractions: np.ndarray
    mean_scores: ad.Tensor
    tokens: int
    selected: np.ndarray | None = None    # (T, K) choices, replayable via ``fixed_selection``

    @property
    def r(self) -> np.ndarray:
        return self.mean_scores.data


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated scores: equal scores keep the lower index first
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def route_scores(logits: np.ndarray, k: int) -> MoEGates:
    """Softmax over routing logits followed by top-K selection (no renormalisation)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-K must satisfy 1 <= K <= N, got K={k}, N={n}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    scores = e / e.sum(axis=-1, keepdims=True)
    selected = topk_indices(scores, k)
    gates = np.zeros_like(scores)
    rows = np.arange(scores.shape[0])[:, None]
    gates[rows, selected] = scores[rows, selected]
    return MoEGates(scores, gates, np.full(scores.shape[0], np.nan), selected)


class FeedForward:
    """Bias-free two-layer tanh network."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.w1 = ad.tensor(glorot(rng, d_model, hidden), requires_grad=True)
        self.w2 = ad.tensor(glorot(rng, hidden, d_model), requires_grad=True)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"w1": self.w1, "w2": self.w2}

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.matmul(ad.tanh(ad.matmul(x, self.w1)), self.w2)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1.data) @ self.w2.data


class MoELayer:
    """``shared_gate * shared(u) + sum_i gate_i * expert_i(u)`` over the top-K experts."""

    def __init__(self, d_model: int, n_experts: int, top_k: int, d_expert: int, d_ff: int,
                 rng: np.random.Generator):
        if not 1 <= top_k <= n_experts:
            raise ValueError(f"top-K must satisfy 1 <= K <= N, got K={top_k}, N={n_experts}")
        self.n_experts, self.top_k = n_experts, top_k
        self.router = ad.tensor(rng.normal(0, 0.02, size=(d_model, n_experts)), requires_grad=True)
        self.shared_gate = ad.tensor(rng.normal(0, 0.02, size=d_model), requires_grad=True)
        self.experts = [FeedForward(d_model, d_expert, rng) for _ in range(n_experts)]
        self.shared = FeedForward(d_model, d_ff, rng)

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {"router": self.router, "shared_gate": self.shared_gate}
        for i, e in enumerate(self.experts):
            params.update({f"experts.{i}.{k}": v for k, v in e.parameters().items()})
        params.update({f"shared.{k}": v for k, v in self.shared.parameters().items()})
        return params

    def route(self, u) -> MoEGates:
        u = np.atleast_2d(np.asarray(u.data if isinstance(u, ad.Tensor) else u, dtype=np.float64))
        gates = route_scores(u @ self.router.data, self.top_k)
        gates.shared = 1.0 / (1.0 + np.exp(-(u @ self.shared_gate.data)))
        return gates

    def __call__(self, u: ad.Tensor, fixed_selection: np.ndarray | None = None):
        """Apply the layer to token rows ``u`` of shape ``(T, d_model)``.

        Returns the output rows and the routing statistics of these tokens.
        ``fixed_selection`` pins the top-K choice (used by gradient checks,
        where selection is piecewise constant).
        """
        T = u.shape[0]
        scores = ad.softmax(ad.matmul(u, self.router), axis=-1)
        selected = topk_indices(scores.data, self.top_k) if fixed_selection is None \
            else np.asarray(fixed_selection)
        shared_gate = ad.sigmoid(ad.matmul(u, self.shared_gate))
        out = self.shared(u) * ad.reshape(shared_gate, (T, 1))

        for i, expert in enumerate(self.experts):
            rows, _ = np.nonzero(selected == i)
            if rows.size == 0:
                continue
            gate = ad.reshape(scores[rows, np.full(rows.size, i)], (rows.size, 1))
            contrib = expert(u[rows]) * gate
            out = out + ad.scatter_rows(contrib, rows, T)

        counts = np.bincount(selected.reshape(-1), minlength=self.n_experts).astype(np.float64)
        fractions = counts / max(self.top_k * T, 1)
        stats = RoutingStats(fractions, ad.mean(scores, axis=0), T, selected)
        return out, stats


class DenseFFN:
    """Stand-in for the MoE block in ablations: one tanh FFN of the active width."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.ffn = FeedForward(d_model, hidden, rng)

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.ffn.parameters()

    def __call__(self, u: ad.Tensor, fixed_selection=None):
        return self.ffn(u), None


def aux_loss(stats: RoutingStats, n_experts: int | None = None) -> ad.Tensor:
    """Load-balancing loss ``N * sum_i f_i r_i``; ``f`` is treated as a constant."""
    if stats.tokens < 1:
        raise ValueError("routing statistics need at least one token")
    n = n_experts if n_experts is not None else stats.fractions.size
    return ad.affine(ad.sum(stats.mean_scores * stats.fractions), float(n))


def merge_stats(stats: Sequence[RoutingStats]) -> RoutingStats:
    """Token-weighted pooling of statistics gathered over several batches."""
    total = sum(s.tokens for s in stats)
    f = sum(s.fractions * s.tokens for s in stats) / total
    r = sum(s.r * s.tokens for s in stats) / total
    return RoutingStats(f, ad.tensor(r), total)


GATING_HEADER = ("layer", "expert", "selection_fraction", "mean_score")


def gating_rows(per_layer: Sequence[RoutingStats]) -> list[tuple[int, int, float, float]]:
    rows = []
    for layer, st in enumerate(per_layer):
        for e, (f, r) in enumerate(zip(st.fractions, st.r)):
            rows.append((layer, e, float(f), float(r)))
    return rows


def write_gating_csv(path, rows: Iterable[tuple[int, int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GATING_HEADER)
        for layer, e, f, r in rows:
            w.writerow([layer, e, repr(f), repr(r)])
