"""Variance-preserving diffusion with velocity (v) parameterisation.

Signal and noise scales follow ``alpha(t) = cos(pi t / 2)`` and
``sigma(t) = sin(pi t / 2)``. With ``z_t = alpha x + sigma eps`` the velocity
target is ``v = alpha eps - sigma x``, and both ``x`` and ``eps`` can be read
back from ``(z_t, v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

__all__ = [
    "NoiseSchedule",
    "DiffusionState",
    "alpha",
    "sigma",
    "forward_diffuse",
    "v_target",
    "reconstruct_x",
    "reconstruct_eps",
    "v_loss",
    "rmse",
    "euler_sample",
    "initial_noise",
]


def alpha(t) -> np.ndarray:
    """Signal scale, exactly 1 at ``t = 0`` and exactly 0 at ``t = 1``."""
    t = np.asarray(t, dtype=np.float64)
    return np.where(t >= 1.0, 0.0, np.cos(0.5 * np.pi * t))


def sigma(t) -> np.ndarray:
    """Noise scale, exactly 0 at ``t = 0`` and exactly 1 at ``t = 1``."""
    t = np.asarray(t, dtype=np.float64)
    return np.where(t >= 1.0, 1.0, np.sin(0.5 * np.pi * t))


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretised schedule on the grid ``t_i = i / steps``."""

    steps: int = 1000
    times: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        times = np.arange(self.steps + 1, dtype=np.float64) / self.steps
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "alpha", self.alpha_at(times))
        object.__setattr__(self, "sigma", self.sigma_at(times))

    # overridable so tests can perturb the schedule
    def alpha_at(self, t):
        return alpha(t)

    def sigma_at(self, t):
        return sigma(t)

    def coefficients(self, t: float) -> tuple[float, float]:
        if not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return float(self.alpha_at(t)), float(self.sigma_at(t))


DEFAULT_SCHEDULE = NoiseSchedule()


@dataclass
class DiffusionState:
    z: np.ndarray
    t: float


def _pair(name, a, b):
    a = np.asarray(getattr(a, "data", a))
    b = np.asarray(getattr(b, "data", b))
    if a.shape != b.shape:
        raise ShapeError(name, a.shape, b.shape)
    return a, b


def _coef(t, sched, dtype, ndim):
    """Per-sample coefficients; ``t`` may be a scalar or one value per row."""
    sched = sched or DEFAULT_SCHEDULE
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    a = np.asarray(sched.alpha_at(t), dtype=dtype)
    s = np.asarray(sched.sigma_at(t), dtype=dtype)
    if a.ndim:
        shape = a.shape + (1,) * (ndim - a.ndim)
        a, s = a.reshape(shape), s.reshape(shape)
    return a, s


def _result_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if dt in (np.float32, np.float64) else np.dtype(np.float32)


def forward_diffuse(x, eps, t, sched: NoiseSchedule | None = None) -> np.ndarray:
    x, eps = _pair("forward_diffuse", x, eps)
    a, s = _coef(t, sched, _result_dtype(x, eps), x.ndim)
    return a * x + s * eps


def v_target(x, eps, t, sched: NoiseSchedule | None = None) -> np.ndarray:
    x, eps = _pair("v_target", x, eps)
    a, s = _coef(t, sched, _result_dtype(x, eps), x.ndim)
    return a * eps - s * x


def reconstruct_x(z, v, t, sched: NoiseSchedule | None = None) -> np.ndarray:
    z, v = _pair("reconstruct_x", z, v)
    a, s = _coef(t, sched, _result_dtype(z, v), z.ndim)
    return a * z - s * v


def reconstruct_eps(z, v, t, sched: NoiseSchedule | None = None) -> np.ndarray:
    z, v = _pair("reconstruct_eps", z, v)
    a, s = _coef(t, sched, _result_dtype(z, v), z.ndim)
    return s * z + a * v


def v_loss(v_hat, v) -> Tensor:
    """Mean squared error between predicted and target velocity.

    Differentiable with respect to ``v_hat`` when it is tracked on a tape.
    """
    v_hat = v_hat if isinstance(v_hat, Tensor) else Tensor(v_hat)
    v = v if isinstance(v, Tensor) else Tensor(v)
    if v_hat.shape != v.shape:
        raise ShapeError("v_loss", v_hat.shape, v.shape)
    d = nx.sub(v_hat, v)
    return nx.mean(nx.mul(d, d))


def rmse(v_hat, v) -> float:
    return math.sqrt(v_loss(v_hat, v).item())


def initial_noise(shape: Sequence[int], seed) -> np.ndarray:
    """Standard normal draw at ``t = 1``.

    ``seed`` is either one integer for the whole array or a sequence with
    one integer per leading (batch) row, so that rows sampled together
    match rows sampled alone.
    """
    shape = tuple(int(s) for s in shape)
    if np.ndim(seed) == 0:
        return np.random.default_rng(int(seed)).standard_normal(shape, dtype=np.float32)
    seeds = list(seed)
    if len(seeds) != shape[0]:
        raise ValueError(f"{len(seeds)} seeds for a batch of {shape[0]}")
    return np.stack([
        np.random.default_rng(int(s)).standard_normal(shape[1:], dtype=np.float32) for s in seeds
    ])


def euler_sample(
    model: Callable,
    cond,
    shape: Sequence[int],
    steps: int = 50,
    seed=0,
    sched: NoiseSchedule | None = None,
    callback: Callable | None = None,
) -> np.ndarray:
    """Deterministic first-order sampler from ``t = 1`` down to ``t = 0``.

    Each step predicts ``v``, recovers ``x`` and ``eps`` and re-noises to the
    next grid time: ``z <- alpha(t') x_hat + sigma(t') eps_hat``.
    ``model(z, t, cond)`` must return an array shaped like ``z``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    sched = sched or DEFAULT_SCHEDULE
    z = initial_noise(shape, seed)
    for i in range(steps, 0, -1):
        t, t_next = i / steps, (i - 1) / steps
        v_hat = model(z, t, cond)
        v_hat = np.asarray(getattr(v_hat, "data", v_hat))
        if v_hat.shape != z.shape:
            raise ShapeError("euler_sample", z.shape, v_hat.shape, detail="model output must match sample shape")
        x_hat = reconstruct_x(z, v_hat, t, sched)
        eps_hat = reconstruct_eps(z, v_hat, t, sched)
        a_next, s_next = sched.coefficients(t_next)
        z = (np.float32(a_next) * x_hat + np.float32(s_next) * eps_hat).astype(np.float32)
        if callback is not None:
            callback(DiffusionState(z=z, t=t_next))
    return z
