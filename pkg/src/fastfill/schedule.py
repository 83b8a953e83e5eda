"""Noise schedule and closed-form diffusion arithmetic.

Forward noising follows x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps with
abar_t the cumulative product of (1 - beta_s) over s <= t. The one-step clean
estimate inverts the same formula given a predicted noise. All operations are
pure; they work on numpy arrays or torch tensors (scalar t or a per-sample
vector of timesteps) and never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

ALPHA_BAR_FLOOR = 1e-12


@dataclass(frozen=True)
class ScheduleConfig:
    """Schedule parameters as they appear in config files.

    `slow_sampler` labels the noising convention used for the multi-step base
    ("ddpm" or "ddim"); both share the forward formula above, so the choice has
    no behavioral effect on training and exists only as a surfaced knob.
    """

    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    spacing: str = "linear"
    lcm_count: int = 4
    slow_sampler: str = "ddim"

    def build(self) -> "NoiseSchedule":
        return build_schedule(
            self.num_timesteps,
            self.beta_start,
            self.beta_end,
            self.spacing,
            lcm_count=self.lcm_count,
        )


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha-bar table plus the few-step inference timesteps."""

    T: int
    betas: np.ndarray
    alpha_bar: np.ndarray
    lcm_steps: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.betas.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ValueError("betas/alpha_bar must have shape (T,)")
        if np.any(self.alpha_bar <= 0.0) or np.any(self.alpha_bar > 1.0):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if self.T > 1 and not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing in t")
        steps = tuple(int(t) for t in self.lcm_steps)
        if any(t < 0 or t >= self.T for t in steps):
            raise ValueError("lcm_steps must lie in [0, T-1]")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("lcm_steps must be strictly decreasing")


def build_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    spacing: str = "linear",
    lcm_count: int = 4,
) -> NoiseSchedule:
    """Construct the discrete schedule. Deterministic in its arguments.

    `spacing` is "linear" (betas on a straight line) or "scaled_linear"
    (linear in sqrt(beta), squared back). If `lcm_count` does not divide T the
    few-step set degrades to the single timestep [T-1].
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    if spacing == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif spacing == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    alpha_bar = np.cumprod(1.0 - betas)
    betas.flags.writeable = False
    alpha_bar.flags.writeable = False
    schedule = NoiseSchedule(T=T, betas=betas, alpha_bar=alpha_bar)
    n = lcm_count if (lcm_count >= 1 and T % lcm_count == 0) else 1
    steps = lcm_timesteps(schedule, n)
    return NoiseSchedule(T=T, betas=betas, alpha_bar=alpha_bar, lcm_steps=steps)


def lcm_timesteps(schedule: NoiseSchedule, n: int) -> tuple[int, ...]:
    """Few-step inference timesteps: t_i = T-1 - i*(T/n) for i in 0..n-1."""
    T = schedule.T
    if n < 1 or T % n != 0:
        raise ValueError(f"step count {n} must divide T={T} evenly")
    stride = T // n
    steps = tuple(T - 1 - i * stride for i in range(n))
    if steps[-1] < 0:
        raise ValueError(f"step count {n} yields negative timesteps for T={T}")
    return steps


def _as_index(t, T: int) -> np.ndarray:
    idx = np.asarray(t)
    if not np.issubdtype(idx.dtype, np.integer):
        if torch.is_tensor(t):
            idx = t.detach().cpu().numpy()
        if not np.issubdtype(np.asarray(idx).dtype, np.integer):
            raise ValueError(f"timestep must be integer, got dtype {idx.dtype}")
    if idx.ndim > 1:
        raise ValueError("timestep must be a scalar or a 1-D batch")
    if np.any(idx < 0) or np.any(idx >= T):
        raise ValueError(f"timestep {t} out of range [0, {T - 1}]")
    return idx


def _coeffs(schedule: NoiseSchedule, t, like):
    """Return (sqrt(abar_t), sqrt(1-abar_t)) broadcastable against `like`."""
    idx = _as_index(t, schedule.T)
    ab = schedule.alpha_bar[idx]
    sa = np.sqrt(ab)
    sb = np.sqrt(1.0 - ab)
    if idx.ndim == 0:
        return float(sa), float(sb)
    if idx.shape[0] != like.shape[0]:
        raise ValueError(
            f"per-sample timesteps ({idx.shape[0]}) must match batch size ({like.shape[0]})"
        )
    shape = (idx.shape[0],) + (1,) * (like.ndim - 1)
    if torch.is_tensor(like):
        return (
            torch.as_tensor(sa, dtype=like.dtype).reshape(shape),
            torch.as_tensor(sb, dtype=like.dtype).reshape(shape),
        )
    return sa.reshape(shape).astype(like.dtype), sb.reshape(shape).astype(like.dtype)


def _check_same_shape(a, b, names: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{names} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x0, eps, t, schedule: NoiseSchedule):
    """Forward noising: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps, elementwise."""
    _check_same_shape(x0, eps, "x0/eps")
    sa, sb = _coeffs(schedule, t, x0)
    return sa * x0 + sb * eps


def predict_x0(x_t, eps_pred, t, schedule: NoiseSchedule):
    """One-step clean estimate: (x_t - sqrt(1-abar_t)*eps_pred) / sqrt(abar_t)."""
    _check_same_shape(x_t, eps_pred, "x_t/eps_pred")
    idx = _as_index(t, schedule.T)
    if np.any(schedule.alpha_bar[idx] < ALPHA_BAR_FLOOR):
        raise ValueError(f"alpha_bar at t={t} below {ALPHA_BAR_FLOOR}; inversion degenerate")
    sa, sb = _coeffs(schedule, t, x_t)
    return (x_t - sb * eps_pred) / sa


def renoise(x0_hat, eps_fresh, t_next, schedule: NoiseSchedule):
    """Re-corrupt a clean estimate for the next few-step iteration.

    Arithmetic is identical to `add_noise`; kept as a named operation because
    it marks the multistep-sampling boundary.
    """
    return add_noise(x0_hat, eps_fresh, t_next, schedule)


def schedule_rows(schedule: NoiseSchedule):
    """Yield (t, beta, alpha_bar) rows for the CSV dump."""
    for t in range(schedule.T):
        yield t, float(schedule.betas[t]), float(schedule.alpha_bar[t])
