"""Multi-state training loop with base, EMA and graph models.

Each iteration draws one ``(t, k)`` pair for the whole batch. The base model
gets gradients from ``lam * L_eps + cond * L_r``; the EMA model tracks the
base parameters; the graph model is refreshed from the EMA every
``graph_sync_interval`` iterations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from .denoiser import ConvDenoiser, MLPDenoiser, clone_parameters, copy_parameters_, freeze_
from .diffusion import estimate_x0, forward_noise
from .losses import LOSS_VARIANTS, LossBreakdown, noise_loss, relax_loss, total_loss
from .residuals import evaluate_edge
from .schedule import NoiseSchedule, ScheduleError

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
RNG_STREAMS = ("data", "noise", "steps")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``diagnostics`` holds iteration, t, k and cond_rate."""

    def __init__(self, diagnostics: dict):
        super().__init__(f"non-finite loss: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    # loss / multi-state
    lam: float = 1.0
    ema_decay: float = 0.999
    graph_sync_interval: int = 100
    relax_enabled: bool = True
    loss_variant: str = "l2norm"
    # optimization
    total_iterations: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    # schedule
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.1
    # model
    model: str = "mlp"
    hidden_dims: tuple = (128, 128, 128)
    embed_dim: int = 32
    conv_channels: int = 32
    dtype: str = "float32"
    # data
    dataset: str = "gaussian_mixture_8"
    dataset_size: int = 10000
    data_seed: int = 0
    image_dir: str = ""
    # bookkeeping
    log_interval: int = 1
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)

    def validate(self) -> None:
        problems = []
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            problems.append("ema_decay must lie in [0, 1]")
        if self.graph_sync_interval < 1:
            problems.append("graph_sync_interval must be >= 1")
        if self.total_iterations < 0:
            problems.append("total_iterations must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            problems.append(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.T < 2:
            problems.append("T must be >= 2 to draw k < t")
        if self.model not in ("mlp", "conv"):
            problems.append(f"model must be mlp or conv, got {self.model!r}")
        if self.dtype not in DTYPES:
            problems.append(f"dtype must be one of {sorted(DTYPES)}")
        if self.log_interval < 1:
            problems.append("log_interval must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        if 0 < self.total_iterations < self.graph_sync_interval:
            log.warning("graph_sync_interval %d > total_iterations %d: graph model never syncs",
                        self.graph_sync_interval, self.total_iterations)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(T=self.T, beta_start=self.beta_start, beta_end=self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class ModelTriplet:
    base: nn.Module
    ema: nn.Module
    graph: nn.Module

    @classmethod
    def from_base(cls, base: nn.Module) -> "ModelTriplet":
        return cls(base, freeze_(clone_parameters(base)), freeze_(clone_parameters(base)))


def build_model(cfg: TrainConfig, input_dim: int, image_shape=None) -> nn.Module:
    dtype = DTYPES[cfg.dtype]
    if cfg.model == "mlp":
        return MLPDenoiser(input_dim, cfg.hidden_dims, cfg.embed_dim, seed=cfg.seed, dtype=dtype)
    if image_shape is None:
        raise ConfigError("conv model needs an image shape")
    return ConvDenoiser(image_shape, cfg.conv_channels, cfg.embed_dim, seed=cfg.seed, dtype=dtype)


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent named streams so ablations share noise realizations."""
    return {name: np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), i])))
            for i, name in enumerate(RNG_STREAMS)}


def make_optimizer(cfg: TrainConfig, model: nn.Module) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)


class BatchStream:
    """Epoch-style minibatches over a fixed array; reshuffles when exhausted."""

    def __init__(self, data: np.ndarray, batch_size: int):
        if len(data) == 0:
            raise ValueError("empty dataset")
        self.data = data
        self.batch_size = batch_size
        self.perm = np.zeros(0, dtype=np.int64)
        self.cursor = 0

    def next(self, rng: np.random.Generator) -> np.ndarray:
        idx = []
        need = self.batch_size
        while need:
            if self.cursor >= len(self.perm):
                self.perm = rng.permutation(len(self.data))
                self.cursor = 0
            take = self.perm[self.cursor:self.cursor + need]
            self.cursor += len(take)
            need -= len(take)
            idx.append(take)
        return self.data[np.concatenate(idx)]


@dataclass
class TrainState:
    triplet: ModelTriplet
    optimizer: torch.optim.Optimizer
    rngs: dict
    iteration: int = 0
    log: list = field(default_factory=list)
    batches: BatchStream | None = None


def init_state(cfg: TrainConfig, input_dim: int, data: np.ndarray | None = None,
               image_shape=None) -> TrainState:
    cfg.validate()
    base = build_model(cfg, input_dim, image_shape)
    triplet = ModelTriplet.from_base(base)
    batches = BatchStream(data, cfg.batch_size) if data is not None else None
    return TrainState(triplet, make_optimizer(cfg, base), make_rngs(cfg.seed), batches=batches)


def sample_step_pair(rng: np.random.Generator, T: int) -> tuple[int, int]:
    """t uniform on [2, T], then k uniform on [1, t - 1]."""
    if T < 2:
        raise ScheduleError("need T >= 2 to sample k < t")
    t = int(rng.integers(2, T + 1))
    k = int(rng.integers(1, t))
    return t, k


@torch.no_grad()
def ema_update(ema, base, alpha: float):
    """In place ``ema <- alpha * ema + (1 - alpha) * base``.

    Accepts two modules or two sequences of tensors; returns ``ema``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    ema_params = list(ema.parameters()) if isinstance(ema, nn.Module) else list(ema)
    base_params = list(base.parameters()) if isinstance(base, nn.Module) else list(base)
    if len(ema_params) != len(base_params):
        raise ValueError("parameter count mismatch")
    for e, b in zip(ema_params, base_params):
        if e.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(e.shape)} vs {tuple(b.shape)}")
        e.mul_(alpha).add_(b, alpha=1.0 - alpha)
    return ema


def sync_graph(triplet: ModelTriplet) -> None:
    copy_parameters_(triplet.graph, triplet.ema)


def _draw(state: TrainState, x0: torch.Tensor, T: int):
    eps = torch.from_numpy(state.rngs["noise"].standard_normal(x0.shape)).to(x0.dtype)
    t, k = sample_step_pair(state.rngs["steps"], T)
    return eps, t, k


def _finish(state: TrainState, cfg: TrainConfig, loss: torch.Tensor, breakdown: LossBreakdown,
            t: int, k: int) -> LossBreakdown:
    if not all(math.isfinite(v) for v in (breakdown.noise_loss, breakdown.relax_loss, breakdown.total)):
        raise TrainingDiverged({"iteration": state.iteration + 1, "t": t, "k": k,
                                "cond_rate": breakdown.cond_rate, **breakdown.to_record()})
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    tri = state.triplet
    ema_update(tri.ema, tri.base, cfg.ema_decay)
    state.iteration += 1
    if state.iteration % cfg.graph_sync_interval == 0:
        sync_graph(tri)
    if state.iteration % cfg.log_interval == 0:
        state.log.append({"iteration": state.iteration, "t": t, "k": k, **breakdown.to_record()})
    return breakdown


def shortdf_loss(triplet: ModelTriplet, x0: torch.Tensor, eps: torch.Tensor, t: int, k: int,
                 s: NoiseSchedule, lam: float = 1.0, loss_variant: str = "l2norm",
                 relax_enabled: bool = True) -> tuple[torch.Tensor, LossBreakdown]:
    """Total loss for one batch and one ``(t, k)`` pair; gradient reaches ``triplet.base`` only."""
    x_t = forward_noise(x0, eps, t, s)
    eps_hat = triplet.base(x_t, t)
    l_eps = noise_loss(eps, eps_hat, loss_variant)
    relax = torch.zeros((), dtype=l_eps.dtype)
    cond_rate = 0.0
    if relax_enabled:
        # reuse the base prediction for dist(x_t, t)
        dist_t = (x0 - estimate_x0(x_t, eps_hat, t, s)).abs()
        ev = evaluate_edge(x0, x_t, t, k, triplet.base, triplet.ema, triplet.graph, s, dist_t=dist_t)
        cond_rate = float(ev.cond.to(torch.float64).mean())
        if ev.cond.any():
            relax = relax_loss(ev.dist_t, ev.dist_k, ev.edge, ev.cond)
    return total_loss(l_eps, relax, lam, cond_rate)


def train_step(state: TrainState, x0: torch.Tensor, cfg: TrainConfig,
               s: NoiseSchedule) -> tuple[TrainState, LossBreakdown]:
    eps, t, k = _draw(state, x0, s.T)
    loss, breakdown = shortdf_loss(state.triplet, x0, eps, t, k, s, cfg.lam, cfg.loss_variant,
                                   cfg.relax_enabled)
    return state, _finish(state, cfg, loss, breakdown, t, k)


def ddim_train_step(state: TrainState, x0: torch.Tensor, cfg: TrainConfig,
                    s: NoiseSchedule) -> tuple[TrainState, LossBreakdown]:
    """Plain noise-prediction step on the same random streams (no graph terms)."""
    eps, t, k = _draw(state, x0, s.T)
    x_t = forward_noise(x0, eps, t, s)
    l_eps = noise_loss(eps, state.triplet.base(x_t, t), cfg.loss_variant)
    loss = cfg.lam * l_eps
    breakdown = LossBreakdown(float(l_eps.detach()), 0.0, 0.0, float(loss.detach()), float(cfg.lam))
    return state, _finish(state, cfg, loss, breakdown, t, k)


def run_training(cfg: TrainConfig, state: TrainState, s: NoiseSchedule | None = None,
                 step_fn=train_step, on_checkpoint=None, on_log=None) -> TrainState:
    """Run until ``state.iteration == cfg.total_iterations``.

    ``on_checkpoint(state)`` fires every ``cfg.checkpoint_interval`` iterations;
    ``on_log(record)`` for each new log record.
    """
    s = s or cfg.schedule()
    if state.batches is None:
        raise ValueError("state has no data stream")
    dtype = DTYPES[cfg.dtype]
    while state.iteration < cfg.total_iterations:
        x0 = torch.from_numpy(state.batches.next(state.rngs["data"])).to(dtype)
        n_logged = len(state.log)
        step_fn(state, x0, cfg, s)
        if on_log is not None:
            for rec in state.log[n_logged:]:
                on_log(rec)
        if on_checkpoint and cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            on_checkpoint(state)
    return state

