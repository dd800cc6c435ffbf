"""Variance schedules.

Timesteps are 1-indexed (``t in [1, T]``); ``t = 0`` is the clean-data
boundary where ``alpha_bar(0) == 1`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for invalid schedule configuration or out-of-range timesteps."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str = "linear"
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind != "linear":
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not isinstance(self.T, (int, np.integer)) or self.T < 1:
            raise ScheduleError(f"T must be a positive integer, got {self.T!r}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"beta_start={self.beta_start}, beta_end={self.beta_end}"
            )
        betas = np.linspace(self.beta_start, self.beta_end, int(self.T), dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention at step ``t``; 1.0 at ``t = 0``."""
        t = int(t)
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= int(t) <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return float(self.betas[int(t) - 1])

    def signal_coef(self, t: int) -> float:
        """sqrt(alpha_bar_t), computed in double precision."""
        return math.sqrt(self.alpha_bar(t))

    def noise_coef(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t), computed in double precision."""
        return math.sqrt(1.0 - self.alpha_bar(t))

    def residual_coef(self, t: int) -> float:
        """sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t): noise error to x0 error gain."""
        return self.noise_coef(t) / self.signal_coef(t)

    def params(self) -> dict:
        return {"T": int(self.T), "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end), "kind": self.kind}

    @classmethod
    def from_params(cls, params: dict) -> "NoiseSchedule":
        return cls(T=int(params["T"]), beta_start=float(params["beta_start"]),
                   beta_end=float(params["beta_end"]), kind=params.get("kind", "linear"))


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(T=T, beta_start=beta_start, beta_end=beta_end)


def alpha_bar(s: NoiseSchedule, t: int) -> float:
    return s.alpha_bar(t)
