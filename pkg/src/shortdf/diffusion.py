"""Forward noising, clean-sample estimation and the DDIM transition.

All functions are pure. Coefficients come from the schedule as Python floats
(double precision) and are applied to tensors of any float dtype.
"""

from __future__ import annotations

import math

import torch

from .schedule import NoiseSchedule, ScheduleError


def _check_t(s: NoiseSchedule, t: int, lo: int = 1) -> int:
    t = int(t)
    if not lo <= t <= s.T:
        raise ScheduleError(f"timestep {t} outside [{lo}, {s.T}]")
    return t


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(x0: torch.Tensor, eps: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t = 0`` is accepted and returns ``x0`` unchanged.
    """
    _check_shapes(x0, eps, "forward_noise")
    t = _check_t(s, t, lo=0)
    if t == 0:
        return x0.clone()
    return s.signal_coef(t) * x0 + s.noise_coef(t) * eps


def estimate_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process using a noise estimate."""
    _check_shapes(x_t, eps_hat, "estimate_x0")
    t = _check_t(s, t, lo=0)
    if t == 0:
        return x_t.clone()
    return (x_t - s.noise_coef(t) * eps_hat) / s.signal_coef(t)


def ddim_step(x0_hat: torch.Tensor, eps_hat: torch.Tensor, k: int, sigma: float,
              s: NoiseSchedule, fresh_noise: torch.Tensor | None = None) -> torch.Tensor:
    """Jump to step ``k`` given a clean estimate and the noise estimate that produced it.

    With ``sigma == 0`` the map is deterministic and ``fresh_noise`` must be
    omitted. ``k = 0`` returns ``x0_hat`` (abar_0 = 1).
    """
    _check_shapes(x0_hat, eps_hat, "ddim_step")
    k = _check_t(s, k, lo=0)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    abar = s.alpha_bar(k)
    radicand = 1.0 - abar - sigma * sigma
    if radicand < 0:
        raise ValueError(f"sigma^2 = {sigma * sigma} exceeds 1 - alpha_bar_{k} = {1.0 - abar}")
    out = math.sqrt(abar) * x0_hat + math.sqrt(radicand) * eps_hat
    if sigma > 0:
        if fresh_noise is None:
            raise ValueError("fresh_noise is required when sigma > 0")
        _check_shapes(x0_hat, fresh_noise, "ddim_step")
        out = out + sigma * fresh_noise
    elif fresh_noise is not None:
        raise ValueError("fresh_noise given with sigma == 0")
    return out
