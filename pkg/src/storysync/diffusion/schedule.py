from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule with a uniform-stride DDIM sub-schedule."""

    alphas_cumprod: torch.Tensor  # float64, (T,)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        return cls(torch.cumprod(1.0 - betas, dim=0))

    @property
    def num_steps(self) -> int:
        return self.alphas_cumprod.shape[0]

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if (t < 0).any() or (t >= self.num_steps).any():
            raise ValueError(f"timestep out of range [0, {self.num_steps})")
        return self.alphas_cumprod[t]

    def ddim_timesteps(self, steps: int = 30) -> list[int]:
        """Descending, evenly spaced timesteps from ``T - 1`` down to 0."""
        if not 1 <= steps <= self.num_steps:
            raise ValueError(f"steps must lie in [1, {self.num_steps}]")
        if steps == 1:
            return [self.num_steps - 1]
        ts = np.round(np.linspace(0, self.num_steps - 1, steps)).astype(int)
        return [int(t) for t in ts[::-1]]


def add_noise(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``; ``t`` is a scalar or per-row tensor."""
    abar = schedule.alpha_bar(t).to(x0.dtype)
    if abar.ndim:
        abar = abar.view(-1, *([1] * (x0.ndim - 1)))
    return abar.sqrt() * x0 + (1 - abar).sqrt() * noise
