"""Residual propagation, edge weights and the relaxation test.

``dist`` and ``edge`` are elementwise arrays shaped like the data; they are
only reduced to one number per sample inside :func:`relaxation_cond` and the
relaxation loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffusion import ddim_step, estimate_x0, forward_noise
from .schedule import NoiseSchedule


def initial_residual(x0: torch.Tensor, x_t: torch.Tensor, t: int, model, s: NoiseSchedule) -> torch.Tensor:
    """One-jump estimation error ``x0 - x0_hat(x_t)``."""
    return x0 - estimate_x0(x_t, model(x_t, t), t, s)


def dist(x0: torch.Tensor, x_noisy: torch.Tensor, t: int, model, s: NoiseSchedule) -> torch.Tensor:
    return initial_residual(x0, x_noisy, t, model, s).abs()


def step_residual(x_hat_ki: torch.Tensor, x_hat_kj: torch.Tensor, k_i: int, k_j: int,
                  model, s: NoiseSchedule) -> torch.Tensor:
    """Residual change when moving from ``k_i`` down to ``k_j``.

    ``x_hat_kj`` must be the deterministic DDIM image of ``x_hat_ki``.
    """
    if k_j >= k_i:
        raise ValueError(f"step_residual needs k_j < k_i, got k_i={k_i}, k_j={k_j}")
    return s.residual_coef(k_j) * (model(x_hat_kj, k_j) - model(x_hat_ki, k_i))


@dataclass
class ResidualReport:
    initial_residual: torch.Tensor
    per_step_residuals: list
    path_residual_lhs: torch.Tensor
    path_residual_rhs: torch.Tensor

    def to_record(self) -> dict:
        gap = (self.path_residual_lhs - self.path_residual_rhs).abs()
        return {
            "initial_residual_mean_abs": float(self.initial_residual.abs().mean()),
            "per_step_residual_mean_abs": [float(r.abs().mean()) for r in self.per_step_residuals],
            "path_residual_lhs_mean_abs": float(self.path_residual_lhs.abs().mean()),
            "path_residual_rhs_mean_abs": float(self.path_residual_rhs.abs().mean()),
            "lhs_rhs_gap_max": float(gap.max()),
        }


def path_residual_report(x0: torch.Tensor, path, model, s: NoiseSchedule,
                         eps: torch.Tensor) -> ResidualReport:
    """Walk a deterministic path from ``x_{k1} = forward_noise(x0, eps, k1)``.

    ``lhs`` is ``x0`` minus the final clean estimate. ``rhs`` is
    ``R(k1, 0) - sum_i R(k_i, k_{i+1})``. Walking the path shows the exact
    relation is ``lhs = R(k1, 0) + sum_i R(k_i, k_{i+1})``, so the two fields
    generally differ whenever the step residuals are nonzero.
    """
    steps = [int(k) for k in getattr(path, "steps", path)]
    if not steps or any(a <= b for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise ValueError(f"path must be strictly decreasing and end above 0, got {steps}")
    x = forward_noise(x0, eps, steps[0], s)
    eps_hat = model(x, steps[0])
    x0_hat = estimate_x0(x, eps_hat, steps[0], s)
    r0 = x0 - x0_hat
    per_step = []
    for k_i, k_j in zip(steps, steps[1:]):
        x_next = ddim_step(x0_hat, eps_hat, k_j, 0.0, s)
        per_step.append(step_residual(x, x_next, k_i, k_j, model, s))
        x = x_next
        eps_hat = model(x, k_j)
        x0_hat = estimate_x0(x, eps_hat, k_j, s)
    rhs = r0.clone()
    for r in per_step:
        rhs = rhs - r
    return ResidualReport(r0, per_step, x0 - x0_hat, rhs)


def transfer_pair(x0: torch.Tensor, x_t: torch.Tensor, t: int, k: int, graph_model,
                  s: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Move ``x_t`` to step ``k`` twice with the same noise estimate.

    Returns ``(x_hat_k, x_k)``: the first starts from the model's clean
    estimate at ``t``, the second from the true ``x0``.
    """
    if k >= t:
        raise ValueError(f"edge needs k < t, got k={k}, t={t}")
    eps_t = graph_model(x_t, t)
    x0_hat_t = estimate_x0(x_t, eps_t, t, s)
    x_hat_k = ddim_step(x0_hat_t, eps_t, k, 0.0, s)
    x_k = ddim_step(x0, eps_t, k, 0.0, s)
    return x_hat_k, x_k


def edge_weight(x0: torch.Tensor, x_t: torch.Tensor, t: int, k: int, graph_model,
                s: NoiseSchedule, pair=None) -> torch.Tensor:
    """``|x0 - x0_hat'_k| - |x0 - x0_hat_k|``; may be negative."""
    x_hat_k, x_k = pair if pair is not None else transfer_pair(x0, x_t, t, k, graph_model, s)
    via_estimate = estimate_x0(x_hat_k, graph_model(x_hat_k, k), k, s)
    via_clean = estimate_x0(x_k, graph_model(x_k, k), k, s)
    return (x0 - via_estimate).abs() - (x0 - via_clean).abs()


def per_sample_mean(a: torch.Tensor) -> torch.Tensor:
    return a.reshape(a.shape[0], -1).mean(dim=1) if a.dim() > 1 else a


def relaxation_cond(dist_t, dist_k, edge, reduction: str = "per_sample_mean") -> torch.Tensor:
    """Strict test ``dist_t > dist_k + edge`` per sample (means over features)."""
    if reduction != "per_sample_mean":
        raise ValueError(f"unsupported reduction {reduction!r}")
    dist_t, dist_k, edge = (torch.as_tensor(v, dtype=torch.float64) if not isinstance(v, torch.Tensor) else v
                            for v in (dist_t, dist_k, edge))
    if not dist_t.shape == dist_k.shape == edge.shape:
        raise ValueError("relaxation_cond: shape mismatch")
    if dist_t.dim() == 0:
        return (dist_t > dist_k + edge).reshape(1)
    return per_sample_mean(dist_t) > per_sample_mean(dist_k) + per_sample_mean(edge)


@dataclass
class EdgeEvaluation:
    edge: torch.Tensor
    dist_t: torch.Tensor
    dist_k: torch.Tensor
    cond: torch.Tensor


def evaluate_edge(x0: torch.Tensor, x_t: torch.Tensor, t: int, k: int, base, ema, graph,
                  s: NoiseSchedule, dist_t: torch.Tensor | None = None) -> EdgeEvaluation:
    """Role-assigned evaluation: dist_t by ``base``, edge by ``graph``, dist_k by ``ema``.

    ``edge`` and ``dist_k`` are computed without autograd; ``dist_t`` keeps
    whatever graph ``base`` builds (pass a precomputed one to reuse it).
    """
    if dist_t is None:
        dist_t = dist(x0, x_t, t, base, s)
    with torch.no_grad():
        pair = transfer_pair(x0, x_t, t, k, graph, s)
        edge = edge_weight(x0, x_t, t, k, graph, s, pair=pair)
        dist_k = dist(x0, pair[1], k, ema, s)
        cond = relaxation_cond(dist_t.detach(), dist_k, edge)
    return EdgeEvaluation(edge, dist_t, dist_k, cond)


class PerfectPredictor:
    """Returns the exact noise consistent with a known clean batch ``x0``.

    For any ``x`` at step ``t`` it answers ``(x - sqrt(abar_t) x0) / sqrt(1 - abar_t)``,
    so every clean estimate it induces equals ``x0``.
    """

    def __init__(self, x0: torch.Tensor, s: NoiseSchedule):
        self.x0 = x0
        self.s = s

    def __call__(self, x: torch.Tensor, t) -> torch.Tensor:
        t = int(t)
        return (x - self.s.signal_coef(t) * self.x0) / self.s.noise_coef(t)
