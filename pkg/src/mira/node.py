"""Latent extrapolation by a learned ODE.

The hidden state of the last observed token is evolved to an arbitrary
target time with an adaptive Dormand-Prince 5(4) integrator. Gradients are
available through the adjoint method (a second, backward-in-time solve) or
by differentiating the accepted solver steps directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .attention import glorot

# Dormand-Prince 5(4) tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4


class ODESolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-6
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    max_steps: int = 10000

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class SolveInfo:
    times: list[float] = field(default_factory=list)   # start of each accepted step
    steps: list[float] = field(default_factory=list)   # its signed size
    rejected: int = 0
    evaluations: int = 0


@dataclass(frozen=True)
class LatentState:
    h: np.ndarray
    t: float

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if not (np.all(np.isfinite(h)) and math.isfinite(self.t)):
            raise ValueError("latent state must be finite")
        object.__setattr__(self, "h", h)


def rms_rows(x: np.ndarray) -> float:
    """Max over leading axes of the root-mean-square along the last axis."""
    if x.ndim <= 1:
        return float(np.sqrt(np.mean(x * x))) if x.size else 0.0
    return float(np.max(np.sqrt(np.mean(x * x, axis=-1))))


def initial_step(span: float) -> float:
    span = abs(span)
    return min(span, 1e-2 * span + 1e-4)


def dopri5(
    fun: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    y0: np.ndarray,
    t1: float,
    config: SolverConfig = SolverConfig(),
    norm: Callable[[np.ndarray], float] = rms_rows,
    first_step: float | None = None,
) -> tuple[np.ndarray, SolveInfo]:
    """Integrate ``dy/dt = fun(t, y)`` from ``t0`` to ``t1`` (either direction)."""
    y = np.array(y0, dtype=np.float64)
    info = SolveInfo()
    span = t1 - t0
    if span == 0:
        return y, info
    direction = 1.0 if span > 0 else -1.0
    h = abs(first_step) if first_step else initial_step(span)
    t = t0
    k1 = fun(t, y)
    info.evaluations += 1
    attempts = 0
    last_accepted = float("nan")
    while direction * (t1 - t) > 0:
        if attempts >= config.max_steps:
            raise ODESolverError(
                f"max steps ({config.max_steps}) exceeded integrating [{t0}, {t1}]; "
                f"reached t={t}, last accepted step {last_accepted}"
            )
        attempts += 1
        remaining = abs(t1 - t)
        last = h >= remaining
        step = direction * (remaining if last else h)
        ks = [k1]
        for i in range(1, 7):
            yi = y + step * sum(a * k for a, k in zip(A[i], ks) if a != 0.0)
            ks.append(fun(t + C[i] * step, yi))
        info.evaluations += 6
        y_new = y + step * sum(b * k for b, k in zip(B5, ks) if b != 0.0)
        err = step * sum(e * k for e, k in zip(E, ks) if e != 0.0)
        if not np.all(np.isfinite(y_new)):
            raise ODESolverError(f"non-finite state at t={t + step} integrating [{t0}, {t1}]")
        scale = config.atol + config.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = norm(err / scale)
        if err_norm <= 1.0:
            info.times.append(t)
            info.steps.append(step)
            t = t1 if last else t + step
            y = y_new
            k1 = ks[6]
            last_accepted = step
            factor = config.max_factor if err_norm == 0 else \
                min(config.max_factor, max(config.min_factor, config.safety * err_norm ** -0.2))
        else:
            info.rejected += 1
            factor = max(config.min_factor, config.safety * err_norm ** -0.2)
            factor = min(factor, 1.0)
        h = abs(step) * factor
    return y, info


def rk_step_tensor(fun, t: float, y: ad.Tensor, step: float) -> ad.Tensor:
    """One Dormand-Prince 5th-order step recorded on the tape."""
    ks = [fun(t, y)]
    for i in range(1, 6):
        incr = None
        for a, k in zip(A[i], ks):
            if a != 0.0:
                term = ad.affine(k, step * a)
                incr = term if incr is None else incr + term
        ks.append(fun(t + C[i] * step, y + incr))
    out = y
    for b, k in zip(B5, ks):
        if b != 0.0:
            out = out + ad.affine(k, step * b)
    return out


# dynamics ----------------------------------------------------------------------------

class Dynamics(Protocol):
    def __call__(self, delta_s, h: np.ndarray) -> np.ndarray: ...

    def vjp(self, delta_s, h: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, dict]: ...


class NeuralDynamics:
    """``f(ds, h) = tanh([h, ds] @ W1) @ W2`` with a zero-initialised output layer."""

    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int | None = None,
                 zero_output: bool = True):
        hidden = hidden or d_model
        self.d_model, self.hidden = d_model, hidden
        self.w1 = ad.tensor(glorot(rng, d_model + 1, hidden), requires_grad=True)
        self.w2 = ad.tensor(np.zeros((hidden, d_model)) if zero_output
                            else glorot(rng, hidden, d_model), requires_grad=True)
        self.spectral: SpectralNormState | None = None

    def parameters(self) -> dict[str, ad.Tensor]:
        return {"w1": self.w1, "w2": self.w2}

    def _pre(self, ds, h):
        w1 = self.w1.data
        ds = np.asarray(ds, dtype=np.float64)
        return h @ w1[:-1] + ds[..., None] * w1[-1]

    def __call__(self, ds, h: np.ndarray) -> np.ndarray:
        return np.tanh(self._pre(ds, h)) @ self.w2.data

    def vjp(self, ds, h: np.ndarray, a: np.ndarray):
        """Cotangent ``a`` pulled back to ``h`` and to the weights (summed over rows)."""
        z = np.tanh(self._pre(ds, h))
        w1, w2 = self.w1.data, self.w2.data
        gz = (a @ w2.T) * (1.0 - z * z)
        gh = gz @ w1[:-1].T
        h2 = np.atleast_2d(h)
        gz2 = np.atleast_2d(gz)
        ds2 = np.broadcast_to(np.asarray(ds, dtype=np.float64), h2.shape[:-1]).reshape(-1)
        gw1 = np.vstack([h2.T @ gz2, ds2[None, :] @ gz2])
        gw2 = np.atleast_2d(z).T @ np.atleast_2d(a)
        return gh, {"w1": gw1, "w2": gw2}

    def tensor_call(self, ds: np.ndarray, h: ad.Tensor) -> ad.Tensor:
        w_h = self.w1[:-1]
        w_t = self.w1[-1]
        pre = ad.matmul(h, w_h) + ad.mul(np.asarray(ds, dtype=np.float64)[..., None], w_t)
        return ad.matmul(ad.tanh(pre), self.w2)


# extrapolation -----------------------------------------------------------------------

def extrapolate(state: LatentState, t_target: float, dynamics: Callable,
                config: SolverConfig = SolverConfig()) -> LatentState:
    """Evolve ``state`` to ``t_target`` under ``dh/ds = dynamics(s - state.t, h)``."""
    if t_target < state.t:
        raise ValueError(f"target time {t_target} precedes state time {state.t}")
    if t_target == state.t:
        return state
    t0 = state.t
    y, _ = dopri5(lambda s, h: dynamics(s - t0, h), t0, state.h, t_target, config)
    return LatentState(y, t_target)


def adjoint_backward(state: LatentState, t_target: float, loss_grad: np.ndarray,
                     dynamics: Dynamics, config: SolverConfig = SolverConfig(),
                     final: np.ndarray | None = None):
    """Gradients of a loss at ``t_target`` with respect to ``state.h`` and the dynamics weights.

    Integrates the state, the adjoint ``a(s) = dL/dh(s)`` and the
    parameter-gradient integrals backward from ``t_target`` to ``state.t``.
    """
    t0 = state.t
    a1 = np.asarray(loss_grad, dtype=np.float64)
    _, probe = dynamics.vjp(0.0, state.h, np.zeros_like(a1))
    if t_target == t0:
        return a1.copy(), {k: np.zeros_like(v) for k, v in probe.items()}
    if final is None:
        final = extrapolate(state, t_target, dynamics, config).h
    h_shape = state.h.shape
    names = list(probe)
    sizes = [probe[k].size for k in names]
    n = state.h.size

    def unpack(y):
        return y[:n].reshape(h_shape), y[n:2 * n].reshape(h_shape)

    def aug(s, y):
        h, a = unpack(y)
        dh = dynamics(s - t0, h)
        gh, gp = dynamics.vjp(s - t0, h, a)
        return np.concatenate([dh.ravel(), -gh.ravel()] + [-gp[k].ravel() for k in names])

    y1 = np.concatenate([np.asarray(final).ravel(), a1.ravel(), np.zeros(sum(sizes))])
    y0, _ = dopri5(aug, t_target, y1, t0, config)
    _, a0 = unpack(y0)
    grads, offset = {}, 2 * n
    for k, size in zip(names, sizes):
        grads[k] = y0[offset:offset + size].reshape(probe[k].shape)
        offset += size
    return a0, grads


class ODEBlock:
    """Batched extrapolation of latent rows, each over its own time gap.

    Every row is mapped to unit time ``tau = (s - t_N) / gap`` so a single
    adaptive solve serves the whole batch; the step-size test takes the
    worst row.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, config: SolverConfig = SolverConfig(),
                 gradient: str = "adjoint", zero_output: bool = True):
        if gradient not in ("adjoint", "direct"):
            raise ValueError(f"gradient must be 'adjoint' or 'direct', got {gradient!r}")
        self.dynamics = NeuralDynamics(d_model, rng, zero_output=zero_output)
        self.config = config
        self.gradient = gradient
        self.last_info: SolveInfo | None = None

    def parameters(self) -> dict[str, ad.Tensor]:
        return self.dynamics.parameters()

    def _rhs(self, gaps: np.ndarray):
        f = self.dynamics
        return lambda tau, h: gaps[:, None] * f(tau * gaps, h)

    def solve(self, h0: np.ndarray, gaps: np.ndarray) -> tuple[np.ndarray, SolveInfo]:
        gaps = np.asarray(gaps, dtype=np.float64)
        if np.any(gaps < 0):
            raise ValueError("target timestamps must not precede the source timestamps")
        if h0.shape[0] == 0 or not np.any(gaps > 0):
            return h0.copy(), SolveInfo()
        return dopri5(self._rhs(gaps), 0.0, h0, 1.0, self.config)

    def __call__(self, h0: ad.Tensor, gaps: np.ndarray) -> ad.Tensor:
        gaps = np.asarray(gaps, dtype=np.float64)
        if self.gradient == "direct":
            return self.direct(h0, gaps)
        h1, info = self.solve(h0.data, gaps)
        self.last_info = info
        if not np.all(np.isfinite(h1)):
            raise ODESolverError("non-finite latent after extrapolation")
        w1, w2 = self.dynamics.w1, self.dynamics.w2
        h0_data = h0.data

        def vjp(g):
            a0, grads = self.adjoint(h0_data, h1, gaps, g)
            return a0, grads["w1"], grads["w2"]

        return ad.custom((h0, w1, w2), h1, vjp, "ode")

    def adjoint(self, h0: np.ndarray, h1: np.ndarray, gaps: np.ndarray, a1: np.ndarray):
        """Backward solve in unit time; returns (dL/dh0, {weight: dL/dweight})."""
        f = self.dynamics
        B, d = h0.shape
        shapes = {"w1": f.w1.shape, "w2": f.w2.shape}
        n = B * d

        def aug(tau, y):
            h = y[:n].reshape(B, d)
            a = y[n:2 * n].reshape(B, d)
            ds = tau * gaps
            dh = gaps[:, None] * f(ds, h)
            gh, gp = f.vjp(ds, h, a * gaps[:, None])
            return np.concatenate([dh.ravel(), -gh.ravel(), -gp["w1"].ravel(), -gp["w2"].ravel()])

        def norm(x):
            rows = x[:2 * n].reshape(2, B, d)
            return max(rms_rows(rows[0]), rms_rows(rows[1]), rms_rows(x[2 * n:]))

        y1 = np.concatenate([h1.ravel(), np.asarray(a1).ravel(),
                             np.zeros(f.w1.size + f.w2.size)])
        y0, _ = dopri5(aug, 1.0, y1, 0.0, self.config, norm=norm)
        a0 = y0[n:2 * n].reshape(B, d)
        g1 = y0[2 * n:2 * n + f.w1.size].reshape(shapes["w1"])
        g2 = y0[2 * n + f.w1.size:].reshape(shapes["w2"])
        return a0, {"w1": g1, "w2": g2}

    def direct(self, h0: ad.Tensor, gaps: np.ndarray) -> ad.Tensor:
        """Differentiate through the accepted steps of a forward solve."""
        _, info = self.solve(h0.data, gaps)
        self.last_info = info
        f = self.dynamics
        g = ad.tensor(gaps[:, None])
        rhs = lambda tau, h: f.tensor_call(tau * gaps, h) * g
        y = h0
        for tau, step in zip(info.times, info.steps):
            y = rk_step_tensor(rhs, tau, y, step)
        return y


# spectral normalisation -------------------------------------------------------------

@dataclass
class SpectralNormState:
    u: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    sigma: dict[str, float] = field(default_factory=dict)


def power_iteration(w: np.ndarray, u: np.ndarray, iterations: int = 1):
    """Return updated left/right vectors and the estimate ``|W v|`` of the top singular value."""
    v = np.zeros(w.shape[1])
    sigma = 0.0
    for _ in range(iterations):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return u, np.zeros(w.shape[1]), 0.0
        v /= nv
        wv = w @ v
        sigma = float(np.linalg.norm(wv))
        if sigma == 0:
            return u, v, 0.0
        u = wv / sigma
    return u, v, sigma


def spectral_normalize(params: dict[str, ad.Tensor], iterations: int = 1,
                       state: SpectralNormState | None = None,
                       rng: np.random.Generator | None = None) -> SpectralNormState:
    """Divide every 2-D weight by its estimated top singular value when that exceeds 1.

    Weights are modified in place; the power-iteration vectors persist in
    the returned state so one iteration per training step suffices.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = state or SpectralNormState()
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.data.ndim != 2:
            continue
        u = state.u.get(name)
        if u is None:
            u = rng.normal(size=p.data.shape[0])
            u /= np.linalg.norm(u)
        u, v, sigma = power_iteration(p.data, u, iterations)
        state.u[name], state.v[name], state.sigma[name] = u, v, sigma
        if sigma > 1.0:
            p.data /= sigma
    return state
