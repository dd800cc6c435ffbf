"""Noise loss, relaxation loss and their gated sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

LOSS_VARIANTS = ("l2norm", "mse")


def _rows(a: torch.Tensor) -> torch.Tensor:
    return a.reshape(a.shape[0], -1)


def noise_loss(eps: torch.Tensor, eps_hat: torch.Tensor, variant: str = "l2norm") -> torch.Tensor:
    """Batch mean of ``||eps - eps_hat||_2`` per sample, or plain MSE."""
    if eps.shape != eps_hat.shape:
        raise ValueError("noise_loss: shape mismatch")
    diff = _rows(eps - eps_hat)
    if variant == "l2norm":
        return torch.linalg.vector_norm(diff, dim=1).mean()
    if variant == "mse":
        return diff.pow(2).mean()
    raise ValueError(f"unknown loss variant {variant!r}")


def relax_loss(dist_t: torch.Tensor, dist_k: torch.Tensor, edge: torch.Tensor,
               cond: torch.Tensor) -> torch.Tensor:
    """Per-sample ``||dist_k + edge - dist_t||_2``, zeroed where ``cond`` is false, batch mean.

    ``dist_k`` and ``edge`` are detached; only ``dist_t`` carries gradient.
    """
    if not dist_t.shape == dist_k.shape == edge.shape:
        raise ValueError("relax_loss: shape mismatch")
    target = (dist_k + edge).detach()
    if dist_t.dim() == 0:
        dist_t, target = dist_t.reshape(1), target.reshape(1)
    per_sample = torch.linalg.vector_norm(_rows(target - dist_t), dim=1)
    gate = cond.reshape(-1).to(per_sample.dtype)
    return (gate * per_sample).mean()


@dataclass
class LossBreakdown:
    noise_loss: float
    relax_loss: float
    cond_rate: float
    total: float
    lam: float

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["lambda"] = rec.pop("lam")
        return rec


def total_loss(noise, relax, lam: float = 1.0, cond_rate: float = 0.0):
    """``lam * noise + relax`` where ``relax`` is already gated.

    Returns ``(total, breakdown)``; ``total`` stays a tensor when the inputs are.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    total = lam * noise + relax
    breakdown = LossBreakdown(_scalar(noise), _scalar(relax), float(cond_rate), _scalar(total), float(lam))
    return total, breakdown


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
