"""Direct diffusion bridge between a clean image x0 and its measurement x1 = y.

States are ``x_t = (1 - a_t) x0 + a_t x1 (+ s_t z)`` with ``a_t = t`` and
``s_t = 0`` by default. A predictor ``F(x_t, t)`` is trained to regress x0,
and sampling walks ``t = 1 -> 0`` with

    x_s = (1 - s/t) F(x_t, t) + (s/t) x_t

Functions accept numpy arrays or torch tensors; images may be single
``(H, W, C)`` arrays or batches with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# predictor(x_t_batch, t_batch) -> x0_hat_batch
Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _linear(t):
    return t


def _zero(t):
    return 0.0 * t


@dataclass(frozen=True)
class BridgeConfig:
    alpha_schedule: Callable = _linear
    sigma_schedule: Callable = _zero

    def __post_init__(self):
        grid = np.linspace(0.0, 1.0, 101)
        a = np.asarray(self.alpha_schedule(grid), dtype=np.float64)
        if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) < 0):
            raise ValueError("alpha schedule must satisfy a(0)=0, a(1)=1 and be nondecreasing")


@dataclass(frozen=True)
class TimestepSchedule:
    steps: tuple[float, ...]

    def __post_init__(self):
        steps = tuple(float(s) for s in self.steps)
        if len(steps) < 2:
            raise ValueError("a schedule needs at least two knots")
        if steps[0] != 1.0 or steps[-1] != 0.0:
            raise ValueError(f"schedule must start at 1.0 and end at 0.0, got {steps}")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"schedule must be strictly decreasing, got {steps}")
        object.__setattr__(self, "steps", steps)

    @property
    def nfe(self) -> int:
        return len(self.steps) - 1

    def pairs(self):
        return list(zip(self.steps[:-1], self.steps[1:]))


def uniform_schedule(nfe: int) -> TimestepSchedule:
    """``[1, (nfe-1)/nfe, ..., 1/nfe, 0]``."""
    if int(nfe) != nfe or nfe < 1:
        raise ValueError(f"nfe must be a positive integer, got {nfe}")
    nfe = int(nfe)
    return TimestepSchedule(tuple((nfe - k) / nfe for k in range(nfe + 1)))


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _expand_t(t, x, batched: bool):
    """Broadcast a scalar or per-batch-element ``t`` against ``x``."""
    if _is_torch(x):
        import torch

        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    else:
        t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if not batched or t.shape[0] != x.shape[0]:
        raise ValueError(f"t of shape {tuple(t.shape)} does not match batch of shape {tuple(x.shape)}")
    return t.reshape((-1,) + (1,) * (x.ndim - 1))


def bridge_state(x0, x1, t, cfg: BridgeConfig | None = None, rng: np.random.Generator | None = None):
    """Point on the bridge at time ``t`` (scalar, or one value per batch element)."""
    cfg = cfg or BridgeConfig()
    if tuple(x0.shape) != tuple(x1.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    t_arr = np.asarray(t.cpu() if _is_torch(t) else t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    batched = t_arr.ndim > 0
    a = np.asarray(cfg.alpha_schedule(t_arr), dtype=np.float64)
    s = np.asarray(cfg.sigma_schedule(t_arr), dtype=np.float64)
    a_x = _expand_t(a, x0, batched)
    xt = (1 - a_x) * x0 + a_x * x1
    if np.any(s > 0):
        if rng is None:
            raise ValueError("a random source is required when sigma_t > 0")
        z = rng.standard_normal(tuple(x0.shape))
        if _is_torch(x0):
            import torch

            z = torch.as_tensor(z, dtype=x0.dtype, device=x0.device)
        xt = xt + _expand_t(s, x0, batched) * z
    return xt


def ddb_coefficients(t: float, s: float) -> tuple[float, float]:
    """Weights ``(w_pred, w_state)`` of one update from ``t`` to ``s``."""
    if not t > 0:
        raise ValueError(f"t must be > 0, got {t}")
    if not 0 <= s < t <= 1:
        raise ValueError(f"need 0 <= s < t <= 1, got t={t}, s={s}")
    ratio = s / t
    return 1.0 - ratio, ratio


def ddb_step(x_t, t: float, s: float, x0_hat):
    """Move from time ``t`` to ``s < t`` given the posterior-mean estimate ``x0_hat``."""
    w_pred, w_state = ddb_coefficients(t, s)
    if tuple(x_t.shape) != tuple(x0_hat.shape):
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)} vs x0_hat {tuple(x0_hat.shape)}")
    return w_pred * x0_hat + w_state * x_t


def sample(predictor: Predictor, y, schedule: TimestepSchedule | int = 10, clip: bool = True):
    """Iterate the bridge update from ``t=1`` (``x_1 = y``) down to ``t=0``.

    Intermediate states are left unclipped; only the returned image is
    clipped to [0, 1]. ``y`` may be one image or a batch.
    """
    if not isinstance(schedule, TimestepSchedule):
        schedule = uniform_schedule(schedule)
    single = y.ndim == 3
    x = y[None] if single else y
    n = x.shape[0]
    for t, s in schedule.pairs():
        x0_hat = predictor(x, np.full(n, t))
        x = ddb_step(x, t, s, x0_hat)
    if clip:
        x = x.clip(0.0, 1.0)
    return x[0] if single else x


def sample_trajectory(predictor: Predictor, y, schedule: TimestepSchedule) -> list:
    """All intermediate states ``[x_{t_0}, ..., x_{t_K}]`` (unclipped)."""
    x = y[None] if y.ndim == 3 else y
    states = [x]
    for t, s in schedule.pairs():
        x = ddb_step(x, t, s, predictor(x, np.full(x.shape[0], t)))
        states.append(x)
    return states


def ode_velocity(x_t, t: float, x0_hat):
    """Right-hand side ``dx/dt = (x_t - x0_hat) / t`` of the continuous-time limit."""
    if not t > 0:
        raise ValueError("the bridge ODE is singular at t = 0")
    return (x_t - x0_hat) / t


def sample_times(n: int, rng: np.random.Generator) -> np.ndarray:
    """One independent ``t ~ U[0, 1]`` per batch element."""
    return rng.uniform(0.0, 1.0, size=n)


def training_loss(predictor, x0, y, cfg: BridgeConfig | None = None,
                  rng: np.random.Generator | None = None, t: Sequence[float] | float | None = None):
    """Uniformly weighted squared error between ``predictor(x_t, t)`` and ``x0``.

    A single image draws one ``t``; a batch draws one per element. The mean is
    over all pixels, channels and batch elements. With torch inputs the
    returned value is a differentiable scalar tensor.
    """
    if tuple(x0.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs y {tuple(y.shape)}")
    single = x0.ndim == 3
    if single:
        x0, y = x0[None], y[None]
    n = x0.shape[0]
    if t is None:
        if rng is None:
            raise ValueError("either rng or t is required")
        t = sample_times(n, rng)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    xt = bridge_state(x0, y, t, cfg, rng)
    pred = predictor(xt, t)
    return ((pred - x0) ** 2).mean()
