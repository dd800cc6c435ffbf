"""Checkpoints, config files, training logs and run directories.

A checkpoint is a zip archive holding ``manifest.json`` and one ``.npy``
member per array (little-endian, shape in the npy header). Members are
written in sorted order with a fixed timestamp, so equal states give
byte-identical files.
"""

from __future__ import annotations

import fcntl
import hashlib
import io
import json
import os
import platform
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .datasets import DatasetSpec, Normalization, generate
from .schedule import NoiseSchedule
from .trainer import (DTYPES, BatchStream, ConfigError, ModelTriplet, TrainConfig, TrainState,
                      build_model, make_optimizer)

FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------- archives

def write_archive(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", _ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", _ZIP_EPOCH), buf.getvalue())
    os.replace(tmp, path)


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/"):-len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return manifest, arrays


def file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------- checkpoints

@dataclass
class DataInfo:
    """What is needed to rebuild the model and map samples back to data space."""

    input_dim: int
    normalization: Normalization
    image_shape: tuple | None = None

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "normalization": self.normalization.to_dict(),
                "image_shape": list(self.image_shape) if self.image_shape else None}

    @classmethod
    def from_dict(cls, d: dict) -> "DataInfo":
        shape = tuple(d["image_shape"]) if d.get("image_shape") else None
        return cls(int(d["input_dim"]), Normalization.from_dict(d["normalization"]), shape)


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, cfg: TrainConfig, state: TrainState, info: DataInfo) -> Path:
    arrays = {}
    for role in ("base", "ema", "graph"):
        model = getattr(state.triplet, role)
        for name, p in model.named_parameters():
            arrays[f"model/{role}/{name}"] = p.detach().cpu().numpy()
    opt_sd = state.optimizer.state_dict()
    opt_scalars = {}
    for idx, slots in opt_sd["state"].items():
        for key, val in slots.items():
            if isinstance(val, torch.Tensor):
                arrays[f"optim/{idx}/{key}"] = val.detach().cpu().numpy()
            else:
                opt_scalars[f"{idx}/{key}"] = val
    batches = state.batches
    if batches is not None:
        arrays["data/perm"] = batches.perm.astype(np.int64)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "schedule_params": cfg.schedule().params(),
        "iteration": state.iteration,
        "rng_state": {name: _rng_state(g) for name, g in state.rngs.items()},
        "optimizer": {"param_groups": opt_sd["param_groups"], "scalars": opt_scalars},
        "data": info.to_dict(),
        "batch_cursor": batches.cursor if batches is not None else None,
        "versions": _versions(),
    }
    write_archive(path, manifest, arrays)
    return Path(path)


@dataclass
class Checkpoint:
    cfg: TrainConfig
    state: TrainState
    info: DataInfo
    schedule: NoiseSchedule
    manifest: dict = field(repr=False)
    path: Path | None = None


def load_checkpoint(path, data: np.ndarray | None = None) -> Checkpoint:
    """Rebuild config, models, optimizer and rng streams.

    Pass the training ``data`` to restore the minibatch stream for resumption.
    """
    manifest, arrays = read_archive(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version!r} != {FORMAT_VERSION}")
    cfg = TrainConfig.from_dict(manifest["config"])
    info = DataInfo.from_dict(manifest["data"])
    schedule = NoiseSchedule.from_params(manifest["schedule_params"])
    base = build_model(cfg, info.input_dim, info.image_shape)
    triplet = ModelTriplet.from_base(base)
    dtype = DTYPES[cfg.dtype]
    with torch.no_grad():
        for role in ("base", "ema", "graph"):
            for name, p in getattr(triplet, role).named_parameters():
                key = f"model/{role}/{name}"
                if key not in arrays:
                    raise CheckpointError(f"{path}: missing array {key}")
                p.copy_(torch.from_numpy(arrays[key]).to(dtype))
    optimizer = make_optimizer(cfg, base)
    opt_state: dict = {}
    for key, arr in arrays.items():
        if key.startswith("optim/"):
            _, idx, slot = key.split("/", 2)
            opt_state.setdefault(int(idx), {})[slot] = torch.from_numpy(arr.copy())
    for key, val in manifest["optimizer"]["scalars"].items():
        idx, slot = key.split("/", 1)
        opt_state.setdefault(int(idx), {})[slot] = val
    optimizer.load_state_dict({"state": opt_state, "param_groups": manifest["optimizer"]["param_groups"]})
    rngs = {name: _restore_rng(st) for name, st in manifest["rng_state"].items()}
    batches = None
    if data is not None:
        batches = BatchStream(data, cfg.batch_size)
        if "data/perm" in arrays:
            batches.perm = arrays["data/perm"].astype(np.int64)
        batches.cursor = int(manifest.get("batch_cursor") or 0)
    state = TrainState(triplet, optimizer, rngs, iteration=int(manifest["iteration"]), batches=batches)
    return Checkpoint(cfg, state, info, schedule, manifest, Path(path))


def training_data(cfg: TrainConfig) -> tuple[np.ndarray, DataInfo]:
    spec = DatasetSpec(kind=cfg.dataset, n=cfg.dataset_size, seed=cfg.data_seed, image_dir=cfg.image_dir)
    data = generate(spec)
    return data, DataInfo(data.shape[1], spec.normalization, spec.image_shape)


def _versions() -> dict:
    return {"shortdf": __version__, "numpy": np.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------- config files

def load_config(path, **overrides) -> TrainConfig:
    """Flat YAML mapping of TrainConfig fields (``lambda`` is accepted for ``lam``)."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    nested = sorted(k for k, v in raw.items() if isinstance(v, dict))
    if nested:
        raise ConfigError(f"{path}: nested sections not allowed: {', '.join(nested)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainConfig.from_dict(raw)
    cfg.validate()
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:10]


# ---------------------------------------------------------------- logs

def format_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- run directories

class RunDir:
    """An append-only run directory guarded by an exclusive lock file."""

    def __init__(self, root, cfg: TrainConfig, name: str | None = None):
        root = Path(root)
        base = name or f"{config_hash(cfg)}-{time.strftime('%Y%m%d-%H%M%S')}"
        path = root / base
        n = 1
        while path.exists():
            path = root / f"{base}-{n}"
            n += 1
        path.mkdir(parents=True)
        (path / "checkpoints").mkdir()
        self.path = path
        self._lock = open(path / ".lock", "w")
        try:
            fcntl.flock(self._lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RuntimeError(f"run directory {path} is locked by another process") from None

    def close(self) -> None:
        if self._lock and not self._lock.closed:
            fcntl.flock(self._lock, fcntl.LOCK_UN)
            self._lock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def checkpoint_path(self, iteration: int) -> Path:
        return self.path / "checkpoints" / f"ckpt_{iteration:08d}.npz"


# ---------------------------------------------------------------- samples

def save_samples(path, samples: np.ndarray, header: dict) -> None:
    header = dict(header, shape=list(samples.shape), dtype=str(samples.dtype))
    write_archive(path, {"format_version": FORMAT_VERSION, "kind": "samples", **header},
                  {"samples": samples})


def load_samples(path) -> tuple[np.ndarray, dict]:
    manifest, arrays = read_archive(path)
    if manifest.get("kind") != "samples":
        raise CheckpointError(f"{path} is not a sample file")
    return arrays["samples"], manifest
