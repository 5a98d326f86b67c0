"""Noise schedule and the forward (noising) process over box latents."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, StepOutOfRange


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or len(ab) < 2:
            raise ConfigError("alpha_bar needs at least two entries")
        if ab[0] != 1.0 or np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ConfigError("alpha_bar must start at 1, stay in (0, 1] and strictly decrease")

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise StepOutOfRange(f"step {t} outside [0, {self.T}]")

    def inference_steps(self, num_steps: int) -> np.ndarray:
        """Evenly strided timesteps ``T -> 0``, length ``num_steps + 1``."""
        if num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        return np.round(np.linspace(self.T, 0, num_steps + 1)).astype(np.int64)


def cosine_schedule(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.array([min(1 - f(t + 1) / f(t), max_beta) for t in range(T)])
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar, kind="cosine")


def forward_noise(z0: np.ndarray, t: int, schedule: NoiseSchedule, rng: np.random.Generator, noise=None):
    """Sample ``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; returns ``(z_t, eps)``."""
    schedule.check_step(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = rng.standard_normal(z0.shape) if noise is None else noise
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps, eps
