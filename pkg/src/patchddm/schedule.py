"""Variance schedule, forward noising, and the deterministic reverse step.

The schedule caches, indexed 1..T (index 0 is the empty-product convention
for the cumulative signal retention), are float64 for accuracy; mixing the
scalars into float32 volumes keeps the volumes float32.

The default endpoints run the per-step variance from 0.02 down to 1e-4 as
configured; the cumulative product is order-independent, so either ordering
ends at the same total noise level. ``ascending`` flips to the conventional
increasing ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, mse_loss  # noqa: F401  (mse_loss is part of this surface)

DEFAULT_T = 1000
DEFAULT_BETA_START = 0.02
DEFAULT_BETA_END = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and derived cumulative quantities for t = 1..T."""

    T: int
    beta: np.ndarray        # index 0 unused (0.0), then beta_1..beta_T
    alpha: np.ndarray       # 1 - beta
    alpha_bar: np.ndarray   # cumulative product, alpha_bar[0] == 1
    sqrt_alpha_bar: np.ndarray = field(repr=False, default=None)
    sqrt_one_minus_alpha_bar: np.ndarray = field(repr=False, default=None)

    def validate_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside schedule range 1..{self.T}")


def build_schedule(T: int, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly interpolate the per-step variance between the two endpoints."""
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    for name, value in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not 0.0 < value < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {value}")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # extreme endpoint/length combinations can underflow the cumulative
    # product; reject them rather than hand out a degenerate schedule
    if alpha_bar[-1] <= 0.0 or (np.diff(alpha_bar[1:]) >= 0).any():
        raise ValueError(
            f"schedule T={T}, beta=({beta_start}, {beta_end}) is not "
            "representable: the cumulative signal level underflows float64"
        )
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
    )


def forward_noise(schedule: NoiseSchedule, x0: Tensor, t: int, eps: Tensor) -> Tensor:
    """Jump straight to noise level t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    schedule.validate_t(t)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    a = float(schedule.sqrt_alpha_bar[t])
    b = float(schedule.sqrt_one_minus_alpha_bar[t])
    return Tensor(a * x0.data + b * eps.data, dtype=x0.data.dtype)


def ddim_step(schedule: NoiseSchedule, x_t: Tensor, eps_pred: Tensor,
              t: int, t_prev: int,
              clip_x0: tuple[float, float] | None = None) -> Tensor:
    """One deterministic reverse transition t -> t_prev (t_prev may be 0).

    Reconstructs the clean estimate from the predicted noise and re-noises
    it to the target level; at t_prev = 0 the clean estimate is returned.
    By default the update is the exact algebraic step. ``clip_x0`` bounds
    the intermediate clean estimate to the given range before re-noising;
    at high noise levels the 1/sqrt(abar_t) factor amplifies prediction
    error enormously, and without this bound sampling trajectories of an
    imperfect network drift far outside the data range.
    """
    if not (schedule.T >= t > t_prev >= 0):
        raise ValueError(
            f"ddim_step: need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}, "
            f"T={schedule.T}"
        )
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"ddim_step: x_t {x_t.shape} vs eps_pred {eps_pred.shape}")
    sa_t = float(schedule.sqrt_alpha_bar[t])
    sb_t = float(schedule.sqrt_one_minus_alpha_bar[t])
    sa_p = float(schedule.sqrt_alpha_bar[t_prev])
    sb_p = float(schedule.sqrt_one_minus_alpha_bar[t_prev])
    x0_pred = (x_t.data - sb_t * eps_pred.data) / sa_t
    if clip_x0 is not None:
        x0_pred = np.clip(x0_pred, clip_x0[0], clip_x0[1])
    return Tensor(sa_p * x0_pred + sb_p * eps_pred.data, dtype=x_t.data.dtype)


@dataclass(frozen=True)
class StridePlan:
    """Strictly decreasing timesteps; the final transition targets t = 0."""

    timesteps: tuple[int, ...]

    def __post_init__(self):
        ts = self.timesteps
        if not ts:
            raise ValueError("stride plan needs at least one timestep")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"stride plan must strictly decrease: {ts}")
        if ts[-1] < 1:
            raise ValueError(f"stride plan timesteps must be >= 1: {ts}")

    def __len__(self) -> int:
        return len(self.timesteps)

    def transitions(self):
        """Yield (t, t_prev) pairs, ending with (last, 0)."""
        for t, t_prev in zip(self.timesteps, self.timesteps[1:] + (0,)):
            yield t, t_prev


def make_stride_plan(T: int, num_steps: int) -> StridePlan:
    """Evenly spaced accelerated plan; num_steps == T is the full plan."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in 1..{T}, got {num_steps}")
    stride = T // num_steps
    return StridePlan(tuple(T - i * stride for i in range(num_steps)))
