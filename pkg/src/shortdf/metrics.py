"""Two-sample distances used in place of FID at desk scale."""

from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(len(a), -1)


def mmd_rbf(samples, reference, bandwidths=(0.5, 1.0, 2.0), unbiased: bool = True) -> float:
    """Squared MMD with ``k(x, y) = exp(-|x - y|^2 / (2 h^2))`` averaged over bandwidths.

    The unbiased estimator drops the diagonal of the within-set kernel
    matrices; the result is clamped at 0.
    """
    x, y = _as2d(samples), _as2d(reference)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("mmd_rbf needs nonempty sets")
    if x.shape[1] != y.shape[1]:
        raise ValueError("mmd_rbf: dimension mismatch")
    if unbiased and (len(x) < 2 or len(y) < 2):
        raise ValueError("unbiased mmd needs at least 2 points per set")
    dxx = cdist(x, x, "sqeuclidean")
    dyy = cdist(y, y, "sqeuclidean")
    dxy = cdist(x, y, "sqeuclidean")
    m, n = len(x), len(y)
    total = 0.0
    for h in bandwidths:
        if h <= 0:
            raise ValueError("bandwidths must be positive")
        kxx = np.exp(-dxx / (2.0 * h * h))
        kyy = np.exp(-dyy / (2.0 * h * h))
        kxy = np.exp(-dxy / (2.0 * h * h))
        if unbiased:
            a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
            b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        else:
            a = kxx.sum() / (m * m)
            b = kyy.sum() / (n * n)
        total += a + b - 2.0 * kxy.sum() / (m * n)
    return max(total / len(bandwidths), 0.0)


def random_directions(dim: int, n: int, seed: int) -> np.ndarray:
    """``n`` unit vectors built from stacked random orthonormal frames.

    Each frame is Haar-distributed, so every row is uniform on the sphere;
    orthogonality within a frame lowers the variance of the projection average.
    """
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    blocks = []
    for _ in range(-(-n // dim)):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        blocks.append(q.T)
    return np.concatenate(blocks)[:n]


def equalize_sizes(x: np.ndarray, y: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if len(x) == len(y):
        return x, y
    rng = np.random.Generator(np.random.PCG64(int(seed) + 1))
    if len(x) > len(y):
        return x[np.sort(rng.choice(len(x), len(y), replace=False))], y
    return x, y[np.sort(rng.choice(len(y), len(x), replace=False))]


def sliced_wasserstein(samples, reference, n_projections: int = 64, seed: int = 0) -> float:
    """Mean over unit directions of the 1D W2 distance between projected sets."""
    x, y = _as2d(samples), _as2d(reference)
    if x.shape[1] != y.shape[1]:
        raise ValueError("sliced_wasserstein: dimension mismatch")
    x, y = equalize_sizes(x, y, seed)
    dirs = random_directions(x.shape[1], n_projections, seed)
    px = np.sort(x @ dirs.T, axis=0)
    py = np.sort(y @ dirs.T, axis=0)
    per_dir = np.sqrt(np.mean((px - py) ** 2, axis=0))
    return float(per_dir.mean())


def fid_proxy(samples, reference) -> float:
    """Frechet distance between Gaussian fits of raw features (NOT Inception FID)."""
    x, y = _as2d(samples), _as2d(reference)
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.atleast_2d(np.cov(x, rowvar=False))
    cov_y = np.atleast_2d(np.cov(y, rowvar=False))
    covmean = linalg.sqrtm(cov_x @ cov_y)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d = float(np.sum((mu_x - mu_y) ** 2) + np.trace(cov_x + cov_y - 2.0 * covmean))
    return max(d, 0.0)


METRICS = {"mmd_rbf": mmd_rbf, "sliced_wasserstein": sliced_wasserstein, "fid_proxy": fid_proxy}
