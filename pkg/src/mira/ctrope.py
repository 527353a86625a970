"""Continuous-time rotary position encoding.

Pairs ``(x[2i], x[2i+1])`` are rotated by ``omega_i * t`` with
``omega_i = 10000 ** (-2i / d)``, so the inner product of a query rotated
at ``t1`` and a key rotated at ``t2`` depends on ``t2 - t1`` only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

BASE = 10000.0


@dataclass(frozen=True)
class RotaryFrequencies:
    d: int

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ValueError(f"rotary dimension must be a positive even integer, got {self.d}")

    @property
    def omega(self) -> np.ndarray:
        return frequencies(self.d)


@lru_cache(maxsize=None)
def _frequencies(d: int) -> np.ndarray:
    i = np.arange(d // 2, dtype=np.float64)
    omega = BASE ** (-2.0 * i / d)
    omega.setflags(write=False)
    return omega


def frequencies(d: int) -> np.ndarray:
    RotaryFrequencies(d)
    return _frequencies(d)


def _check(x: np.ndarray, t) -> None:
    if x.shape[-1] % 2:
        raise ValueError(f"rotary input needs an even last dimension, got {x.shape[-1]}")
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("timestamps must be finite")
    if np.any(t < 0):
        raise ValueError("timestamps must be non-negative")


def rotate(x, t) -> np.ndarray:
    """Rotate the trailing dimension of ``x`` by timestamp ``t``.

    ``t`` broadcasts against ``x.shape[:-1]``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check(x, t)
    angles = np.asarray(t, dtype=np.float64)[..., None] * frequencies(x.shape[-1])
    c, s = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, c.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = c * even - s * odd
    out[..., 1::2] = s * even + c * odd
    return out


def rotation_matrix(t: float, d: int) -> np.ndarray:
    """Block-diagonal ``d x d`` matrix whose action equals :func:`rotate`."""
    if d % 2:
        raise ValueError(f"rotary dimension must be even, got {d}")
    _check(np.zeros(d), t)
    R = np.zeros((d, d))
    for i, w in enumerate(frequencies(d)):
        c, s = np.cos(w * t), np.sin(w * t)
        R[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
    return R


def rotation_tables(t: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved cos/sin tables of shape ``t.shape + (d,)`` for :func:`rotate_tensor`."""
    _check(np.zeros(d), t)
    angles = np.asarray(t, dtype=np.float64)[..., None] * frequencies(d)
    return np.repeat(np.cos(angles), 2, axis=-1), np.repeat(np.sin(angles), 2, axis=-1)


@lru_cache(maxsize=None)
def _pair_swap(d: int) -> np.ndarray:
    # x @ P = (-x1, x0, -x3, x2, ...)
    P = np.zeros((d, d))
    for i in range(0, d, 2):
        P[i + 1, i] = -1.0
        P[i, i + 1] = 1.0
    P.setflags(write=False)
    return P


def rotate_tensor(x: ad.Tensor, cos: np.ndarray, sin: np.ndarray) -> ad.Tensor:
    """Differentiable rotation given precomputed tables."""
    swapped = ad.matmul(x, _pair_swap(x.shape[-1]))
    return x * cos + swapped * sin
