"""Causal multi-head self-attention with continuous-time rotary encoding."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .ctrope import rotation_tables, rotate_tensor

NORM_EPS = 1e-8
MASK_VALUE = -1e30


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class RMSNorm:
    """Root-mean-square normalization with a learned per-dimension scale."""

    def __init__(self, dim: int):
        self.scale = ad.tensor(np.ones(dim), requires_grad=True)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"scale": self.scale}

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return rms_normalize(x, self.scale)


def rms_normalize(x: ad.Tensor, scale=None) -> ad.Tensor:
    # x / max(rms, eps): exact unit rms unless rms < eps; zero rows stay zero
    x = x if isinstance(x, ad.Tensor) else ad.tensor(x)
    mean_square = ad.mean(ad.square(x), axis=-1, keepdims=True)
    y = x / ad.sqrt(ad.maximum_scalar(mean_square, NORM_EPS**2))
    return y if scale is None else y * scale


def causal_mask(valid: np.ndarray) -> np.ndarray:
    """Boolean ``(B, T, T)`` mask of *blocked* entries.

    Query ``i`` may see key ``j`` iff ``j <= i`` and both are real tokens.
    Padded query rows are left fully blocked.
    """
    B, T = valid.shape
    allowed = np.tril(np.ones((T, T), dtype=bool))[None] & valid[:, None, :] & valid[:, :, None]
    return ~allowed


class CTRoPEAttention:
    """Multi-head causal attention; queries and keys are rotated by their own timestamps."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, use_time: bool = True):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        head_dim = d_model // heads
        if head_dim % 2:
            raise ValueError(f"head dimension {head_dim} must be even")
        self.d_model, self.heads, self.head_dim = d_model, heads, head_dim
        self.use_time = use_time
        # only the query/key/value projections carry biases
        self.wq = ad.tensor(glorot(rng, d_model, d_model), requires_grad=True)
        self.wk = ad.tensor(glorot(rng, d_model, d_model), requires_grad=True)
        self.wv = ad.tensor(glorot(rng, d_model, d_model), requires_grad=True)
        self.bq = ad.tensor(np.zeros(d_model), requires_grad=True)
        self.bk = ad.tensor(np.zeros(d_model), requires_grad=True)
        self.bv = ad.tensor(np.zeros(d_model), requires_grad=True)
        self.wo = ad.tensor(glorot(rng, d_model, d_model), requires_grad=True)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo}

    def _split(self, x: ad.Tensor) -> ad.Tensor:
        B, T, _ = x.shape
        return ad.transpose(ad.reshape(x, (B, T, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: ad.Tensor, timestamps: np.ndarray, valid: np.ndarray | None = None,
                 return_probs: bool = False):
        """Attend over ``x`` of shape ``(B, T, d_model)`` or ``(T, d_model)``.

        ``timestamps`` has shape ``(B, T)`` (or ``(T,)``) and must be strictly
        increasing over the valid positions of each row.
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        B, T, _ = x.shape
        timestamps = np.asarray(timestamps, dtype=np.float64).reshape(B, -1) if squeeze else \
            np.asarray(timestamps, dtype=np.float64)
        if timestamps.shape != (B, T):
            raise ValueError(f"expected timestamps of shape {(B, T)}, got {timestamps.shape}")
        valid = np.ones((B, T), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        for b in range(B):
            tb = timestamps[b, valid[b]]
            if np.any(np.diff(tb) <= 0):
                raise ValueError(f"timestamps of row {b} are not strictly increasing")

        if self.use_time:
            # padded slots take a harmless timestamp; they are masked out anyway
            positions = np.where(valid, timestamps, np.max(np.where(valid, timestamps, 0.0)))
        else:
            positions = np.cumsum(valid, axis=1) - 1.0
            positions = np.maximum(positions, 0.0)
        cos, sin = rotation_tables(positions[:, None, :], self.head_dim)

        q = rotate_tensor(self._split(ad.matmul(x, self.wq) + self.bq), cos, sin)
        k = rotate_tensor(self._split(ad.matmul(x, self.wk) + self.bk), cos, sin)
        v = self._split(ad.matmul(x, self.wv) + self.bv)

        scores = ad.affine(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.head_dim))
        blocked = causal_mask(valid)[:, None, :, :]
        probs = ad.softmax(ad.masked_fill(scores, blocked, MASK_VALUE), axis=-1)
        probs = probs * valid[:, None, :, None].astype(np.float64)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, self.d_model))
        out = ad.matmul(ctx, self.wo)
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        if return_probs:
            return out, probs
        return out

    def scores(self, x: np.ndarray, timestamps: np.ndarray) -> np.ndarray:
        """Pre-softmax scaled scores per head for a single unbatched sequence."""
        x = np.asarray(x, dtype=np.float64)
        T = x.shape[0]
        q = (x @ self.wq.data + self.bq.data).reshape(T, self.heads, self.head_dim)
        k = (x @ self.wk.data + self.bk.data).reshape(T, self.heads, self.head_dim)
        cos, sin = rotation_tables(np.asarray(timestamps)[:, None], self.head_dim)
        swap = lambda a: np.stack([-a[..., 1::2], a[..., 0::2]], axis=-1).reshape(a.shape)
        q = q * cos + swap(q) * sin
        k = k * cos + swap(k) * sin
        return np.einsum("ihd,jhd->hij", q, k) / math.sqrt(self.head_dim)
