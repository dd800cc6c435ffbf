"""Step schedules and the iterated DDIM sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import ddim_step, estimate_x0
from .schedule import NoiseSchedule

STRATEGIES = ("uniform", "quadratic", "explicit")


class SamplingDiverged(RuntimeError):
    def __init__(self, step_index: int, k: int):
        super().__init__(f"non-finite sample at path index {step_index} (k={k})")
        self.step_index = step_index
        self.k = k


@dataclass(frozen=True)
class SamplingPath:
    """Visited timesteps ``k_1 > ... > k_n >= 1``; the final jump to 0 is implicit."""

    steps: tuple
    strategy: str = "explicit"

    def __post_init__(self):
        steps = tuple(int(k) for k in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("empty sampling path")
        if steps[-1] < 1:
            raise ValueError(f"path timesteps must be >= 1, got {list(steps)}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError(f"path must be strictly decreasing without duplicates, got {list(steps)}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def __len__(self):
        return len(self.steps)


def make_step_schedule(T: int, n_steps: int = 0, strategy: str = "uniform",
                       steps=None) -> SamplingPath:
    """Descending timesteps in [1, T] always including T.

    ``uniform``: ``round(1 + (T - 1) i / (n - 1))``; ``quadratic``: same with
    ``(i / (n - 1))**2``; ``explicit``: validate ``steps`` as given.
    """
    if strategy == "explicit":
        if steps is None:
            raise ValueError("explicit strategy needs steps")
        path = SamplingPath(tuple(steps), "explicit")
        if path.steps[0] > T:
            raise ValueError(f"path starts at {path.steps[0]} > T={T}")
        return path
    if not 1 <= n_steps <= T:
        raise ValueError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    if n_steps == 1:
        return SamplingPath((T,), strategy)
    frac = np.arange(n_steps - 1, -1, -1, dtype=np.float64) / (n_steps - 1)
    if strategy == "quadratic":
        frac = frac ** 2
    elif strategy != "uniform":
        raise ValueError(f"unknown strategy {strategy!r}")
    ks = np.floor(1.0 + (T - 1) * frac + 0.5).astype(np.int64)
    # quadratic spacing can collide near k = 1; push collisions apart
    out = []
    for k in ks[::-1]:
        out.append(max(int(k), out[-1] + 1) if out else int(k))
    if out[-1] > T:
        raise ValueError(f"cannot fit {n_steps} distinct {strategy} steps in [1, {T}]")
    return SamplingPath(tuple(out[::-1]), strategy)


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5A])))
    return torch.from_numpy(rng.standard_normal(shape)).to(dtype)


@torch.no_grad()
def sample_from(model, s: NoiseSchedule, path: SamplingPath, x: torch.Tensor,
                sigma: float = 0.0, seed: int = 0, counter=None) -> torch.Tensor:
    """Run the reverse chain from a given ``x_{k_1}``; returns the final clean estimate."""
    steps = path.steps
    if steps[0] > s.T:
        raise ValueError(f"path starts at {steps[0]} > T={s.T}")
    fresh = None
    if sigma > 0:
        fresh = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xF5])))
    for i, k in enumerate(steps):
        eps_hat = model(x, k)
        if counter is not None:
            counter[0] += 1
        x0_hat = estimate_x0(x, eps_hat, k, s)
        if not torch.isfinite(x0_hat).all():
            raise SamplingDiverged(i, k)
        k_next = steps[i + 1] if i + 1 < len(steps) else 0
        if k_next == 0:
            return x0_hat
        noise = None
        if sigma > 0:
            noise = torch.from_numpy(fresh.standard_normal(tuple(x.shape))).to(x.dtype)
        x = ddim_step(x0_hat, eps_hat, k_next, sigma, s, noise)
    raise AssertionError("unreachable")


def sample(model, s: NoiseSchedule, path: SamplingPath, batch: int, sigma: float = 0.0,
           seed: int = 0, dim: int = 2, dtype=torch.float32, counter=None) -> torch.Tensor:
    """Draw ``x_{k_1} ~ N(0, I)`` from ``seed`` and denoise along ``path``.

    Makes exactly ``len(path)`` model evaluations. The same ``seed`` yields
    the same starting noise for any model, which is what matched-seed
    comparisons rely on.
    """
    x = initial_noise((batch, dim), seed, dtype)
    return sample_from(model, s, path, x, sigma=sigma, seed=seed, counter=counter)
