"""Variance-preserving cosine noise schedule and the forward noising step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal and noise scales for t = 0..T, with alpha_t**2 + sigma_t**2 = 1."""

    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.alpha) - 1


def cosine_schedule(steps: int = 1000, shift: float = 0.008) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    t = np.arange(steps + 1) / steps
    f = np.cos((t + shift) / (1 + shift) * math.pi / 2) ** 2
    abar = np.clip(f / f[0], 0.0, 1.0)
    abar[0] = 1.0
    # keep the schedule monotone after clipping
    abar = np.minimum.accumulate(abar)
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    return NoiseSchedule(alpha, sigma)


def forward_noise(z0, t: int, schedule: NoiseSchedule, eps) -> np.ndarray:
    """Noisy latent ``alpha_t * z0 + sigma_t * eps``; t = 0 returns z0."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} differs from latent shape {z0.shape}")
    if not 0 <= t <= schedule.steps:
        raise ValueError(f"timestep {t} outside [0, {schedule.steps}]")
    if t == 0:
        return z0.copy()
    return schedule.alpha[t] * z0 + schedule.sigma[t] * eps
