"""Noise predictors eps_theta(x, t).

Any callable ``model(x, t) -> eps_hat`` with ``eps_hat.shape == x.shape`` can
be used by the residual, sampler and trainer code; ``t`` is an integer
timestep shared by the whole batch or a ``LongTensor`` of shape ``[batch]``.
The two concrete models here are ``nn.Module`` subclasses so that parameter
access, cloning and autograd come from torch.
"""

from __future__ import annotations

import copy
import math

import torch
from torch import nn


class TimeEmbedding(nn.Module):
    """Sinusoidal timestep features at geometric frequencies (no learned state).

    Frequencies run from 1 down to 1/max_period, so the lowest-index pair
    ``(sin t, cos t)`` alone separates all integer timesteps.
    """

    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        if dim < 2 or dim % 2:
            raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        args = t.to(torch.float64)[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)

    def encode(self, t: int) -> torch.Tensor:
        return self.forward(torch.tensor([int(t)]))[0]


def _timesteps(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.reshape(-1)
        if t.numel() == 1:
            return t.expand(batch)
        if t.numel() != batch:
            raise ValueError(f"got {t.numel()} timesteps for batch of {batch}")
        return t
    return torch.full((batch,), int(t), dtype=torch.long)


class MLPDenoiser(nn.Module):
    """MLP on ``[x, embed(t)]`` for low-dimensional data."""

    def __init__(self, input_dim: int, hidden_dims=(128, 128, 128), embed_dim: int = 32,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not hidden_dims:
            raise ValueError("need at least one hidden layer")
        self.input_dim = input_dim
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.embed = TimeEmbedding(embed_dim)
        gen = torch.Generator().manual_seed(int(seed))
        layers = []
        width = input_dim + embed_dim
        for h in self.hidden_dims:
            layers.append(_linear(width, h, gen, dtype))
            layers.append(nn.SiLU())
            width = h
        layers.append(_linear(width, input_dim, gen, dtype))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        emb = self.embed(_timesteps(t, x.shape[0])).to(x.dtype)
        return self.net(torch.cat([x, emb], dim=1))


class ConvDenoiser(nn.Module):
    """Small conv net for tiny images passed as flattened ``[batch, C*H*W]`` rows."""

    def __init__(self, image_shape=(1, 8, 8), channels: int = 32, embed_dim: int = 32,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.image_shape = tuple(int(v) for v in image_shape)
        self.input_dim = math.prod(self.image_shape)
        c_in = self.image_shape[0]
        self.embed = TimeEmbedding(embed_dim)
        gen = torch.Generator().manual_seed(int(seed))
        self.time_proj = _linear(embed_dim, channels, gen, dtype)
        self.conv_in = _conv(c_in, channels, gen, dtype)
        self.conv_mid = _conv(channels, channels, gen, dtype)
        self.conv_out = _conv(channels, c_in, gen, dtype)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        b = x.shape[0]
        img = x.reshape(b, *self.image_shape)
        emb = self.time_proj(self.embed(_timesteps(t, b)).to(x.dtype))
        h = self.act(self.conv_in(img) + emb[:, :, None, None])
        h = self.act(self.conv_mid(h)) + h
        return self.conv_out(h).reshape(b, -1)


def _linear(n_in: int, n_out: int, gen: torch.Generator, dtype) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=dtype)
    bound = 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        layer.weight.copy_(torch.empty(n_out, n_in, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
        layer.bias.copy_(torch.empty(n_out, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
    return layer


def _conv(c_in: int, c_out: int, gen: torch.Generator, dtype) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, 3, padding=1, dtype=dtype)
    bound = 1.0 / math.sqrt(c_in * 9)
    with torch.no_grad():
        conv.weight.copy_(torch.empty(conv.weight.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
        conv.bias.copy_(torch.empty(c_out, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
    return conv


def make_mlp_denoiser(input_dim: int, hidden_dims, embed_dim: int, seed: int,
                      dtype: torch.dtype = torch.float32) -> MLPDenoiser:
    return MLPDenoiser(input_dim, hidden_dims, embed_dim, seed=seed, dtype=dtype)


def clone_parameters(src: nn.Module) -> nn.Module:
    """Independent deep copy of a model (parameters and buffers)."""
    return copy.deepcopy(src)


def named_arrays(model: nn.Module) -> dict[str, torch.Tensor]:
    """Ordered ``name -> tensor`` view of the trainable parameters."""
    return {name: p for name, p in model.named_parameters()}


def copy_parameters_(dst: nn.Module, src: nn.Module) -> None:
    with torch.no_grad():
        for p_dst, p_src in zip(dst.parameters(), src.parameters()):
            p_dst.copy_(p_src)


def freeze_(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model
