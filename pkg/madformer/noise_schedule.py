"""Linear-beta DDPM schedule, closed-form noising and deterministic DDIM steps."""

import math
from dataclasses import dataclass
from typing import Self, Union

import torch
from pydantic import BaseModel, ConfigDict, Field

from madformer.errors import (
    InvalidCount,
    InvalidRange,
    ShapeMismatch,
    TimestepOrder,
    TimestepOutOfRange,
)

# Below this, 1 - alpha_bar is treated as zero and the implied noise as 0.
_SINGULAR_GUARD = 1e-12


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_steps: int = Field(default=1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def build(self: Self) -> "NoiseSchedule":
        return linear_schedule(self.train_steps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Float64 schedule tables, 1-based in time.

    alpha_bar has T + 1 entries with alpha_bar[0] == 1. beta and sigma have T
    entries, beta[t - 1] being the variance added at step t.
    """

    beta: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    def alpha_bar_at(self: Self, t: int) -> float:
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class NoisyLatent:
    x_t: torch.Tensor
    t: Union[int, torch.Tensor]
    eps: torch.Tensor


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    Raises:
        InvalidRange: Unless 0 < beta_start <= beta_end < 1 and T >= 1
    """
    if T < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRange(
            f"need T >= 1 and 0 < beta_start <= beta_end < 1, "
            f"got T={T}, beta_start={beta_start}, beta_end={beta_end}"
        )
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cat(
        [torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - beta, dim=0)]
    )
    # posterior std of q(x_{t-1} | x_t, x_0)
    sigma = torch.sqrt(beta * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def noising(
    x0: torch.Tensor,
    t: Union[int, torch.Tensor],
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> NoisyLatent:
    """
    x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.

    `t` is an int or an integer tensor matching the leading dimensions of x0;
    it is broadcast over the trailing ones.
    """
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")

    if isinstance(t, int):
        if not 1 <= t <= schedule.T:
            raise TimestepOutOfRange(f"t={t} outside [1, {schedule.T}]")
        a = schedule.alpha_bar_at(t)
        x_t = math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps
        return NoisyLatent(x_t=x_t, t=t, eps=eps)

    t = t.to(torch.long)
    if t.numel() and (t.min() < 1 or t.max() > schedule.T):
        raise TimestepOutOfRange(
            f"timesteps span [{int(t.min())}, {int(t.max())}], outside [1, {schedule.T}]"
        )
    if tuple(x0.shape[: t.ndim]) != tuple(t.shape):
        raise ShapeMismatch(
            f"timesteps {tuple(t.shape)} do not lead latents {tuple(x0.shape)}"
        )
    a = schedule.alpha_bar.to(x0.device)[t].to(x0.dtype)
    a = a.reshape(*t.shape, *([1] * (x0.ndim - t.ndim)))
    x_t = a.sqrt() * x0 + (1.0 - a).sqrt() * eps
    return NoisyLatent(x_t=x_t, t=t, eps=eps)


def ddim_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    One deterministic (eta = 0) DDIM jump from t to t_prev under sample prediction.

    Raises:
        TimestepOrder: Unless 0 <= t_prev < t <= T
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise TimestepOrder(f"need 0 <= t_prev < t <= {schedule.T}, got t={t}, t_prev={t_prev}")
    if t_prev == 0:
        return x0_hat.clone()

    a_t = schedule.alpha_bar_at(t)
    a_prev = schedule.alpha_bar_at(t_prev)
    if 1.0 - a_t < _SINGULAR_GUARD:
        eps_hat = torch.zeros_like(x_t)
    else:
        eps_hat = (x_t - math.sqrt(a_t) * x0_hat) / math.sqrt(1.0 - a_t)
    return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps_hat


def spacing(T: int, num_inference_steps: int) -> list[int]:
    """Evenly strided descending timesteps starting at T."""
    if not 1 <= num_inference_steps <= T:
        raise InvalidCount(f"need 1 <= steps <= {T}, got {num_inference_steps}")
    return [T - (k * T) // num_inference_steps for k in range(num_inference_steps)]


def transitions(timesteps: list[int]) -> list[tuple[int, int]]:
    """(t, t_prev) pairs for a descending spacing, ending at t_prev = 0."""
    return list(zip(timesteps, timesteps[1:] + [0]))
