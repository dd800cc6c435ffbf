"""Deterministic toy data sources.

Synthetic kinds are normalized with fixed per-kind affine maps (population
moments, or moments of a large fixed draw), so train and eval sets drawn with
different seeds share one normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

SYNTHETIC_KINDS = ("gaussian_mixture_8", "swiss_roll", "two_moons")
KINDS = SYNTHETIC_KINDS + ("tiny_images_dir",)

MIXTURE_RADIUS = 2.0
MIXTURE_STD = 0.1
N_MODES = 8


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Normalization:
    """``x_norm = (x_raw - shift) / scale`` per dimension."""

    shift: tuple
    scale: tuple

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - np.asarray(self.shift)) / np.asarray(self.scale)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * np.asarray(self.scale) + np.asarray(self.shift)

    def to_dict(self) -> dict:
        return {"shift": list(self.shift), "scale": list(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(tuple(float(v) for v in d["shift"]), tuple(float(v) for v in d["scale"]))


@dataclass
class DatasetSpec:
    kind: str = "gaussian_mixture_8"
    n: int = 10000
    seed: int = 0
    normalization: Normalization | None = None
    image_dir: str = ""
    image_shape: tuple | None = field(default=None, compare=False)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian_mixture_8(n: int, rng: np.random.Generator, return_labels: bool = False):
    labels = rng.integers(0, N_MODES, size=n)
    angles = 2.0 * math.pi * labels / N_MODES
    centers = MIXTURE_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    x = centers + MIXTURE_STD * rng.standard_normal((n, 2))
    return (x, labels) if return_labels else x


def swiss_roll(n: int, rng: np.random.Generator, noise: float = 0.25) -> np.ndarray:
    u = 1.5 * math.pi * (1.0 + 2.0 * rng.random(n))
    x = np.stack([u * np.cos(u), u * np.sin(u)], axis=1)
    return x + noise * rng.standard_normal((n, 2))


def two_moons(n: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    upper = rng.random(n) < 0.5
    theta = math.pi * rng.random(n)
    x = np.where(upper[:, None],
                 np.stack([np.cos(theta), np.sin(theta)], axis=1),
                 np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1))
    return x + noise * rng.standard_normal((n, 2))


_GENERATORS = {"gaussian_mixture_8": gaussian_mixture_8, "swiss_roll": swiss_roll, "two_moons": two_moons}


@lru_cache(maxsize=None)
def default_normalization(kind: str) -> Normalization:
    if kind == "gaussian_mixture_8":
        # mode centers are symmetric on the circle: mean 0, var r^2/2 + std^2
        scale = math.sqrt(MIXTURE_RADIUS ** 2 / 2 + MIXTURE_STD ** 2)
        return Normalization((0.0, 0.0), (scale, scale))
    if kind in _GENERATORS:
        ref = _GENERATORS[kind](1_000_000, _rng(20240101))
        return Normalization(tuple(ref.mean(axis=0).tolist()), tuple(ref.std(axis=0).tolist()))
    raise DatasetError(f"no default normalization for {kind!r}")


def load_image_dir(path, image_shape=None) -> tuple[np.ndarray, tuple]:
    """PNG files (sorted by name) as ``[n, C*H*W]`` rows in [0, 255]."""
    from PIL import Image

    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise DatasetError(f"no PNG files in {path}")
    rows, errors = [], []
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L") if im.mode in ("L", "1", "P", "I") else im.convert("RGB"),
                                 dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - report every unreadable file
            errors.append(f"{f}: {exc}")
            continue
        img = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        if image_shape is None:
            image_shape = img.shape
        if img.shape != tuple(image_shape):
            errors.append(f"{f}: shape {img.shape} != {tuple(image_shape)}")
            continue
        rows.append(img.reshape(-1))
    if errors:
        raise DatasetError("unreadable images:\n" + "\n".join(errors))
    return np.stack(rows), tuple(int(v) for v in image_shape)


def generate(spec: DatasetSpec) -> np.ndarray:
    """Normalized ``[n, dims]`` float64 array; deterministic in ``spec.seed``."""
    if spec.kind not in KINDS:
        raise DatasetError(f"unknown dataset kind {spec.kind!r}")
    if spec.kind == "tiny_images_dir":
        raw, shape = load_image_dir(spec.image_dir, spec.image_shape)
        spec.image_shape = shape
        norm = spec.normalization or Normalization((127.5,) * raw.shape[1], (127.5,) * raw.shape[1])
        spec.normalization = norm
        x = norm.apply(raw)
        if spec.n and spec.n < len(x):
            x = x[_rng(spec.seed).permutation(len(x))[:spec.n]]
        return x
    if spec.n < 1:
        raise DatasetError("n must be positive")
    norm = spec.normalization or default_normalization(spec.kind)
    spec.normalization = norm
    return norm.apply(_GENERATORS[spec.kind](spec.n, _rng(spec.seed)))
