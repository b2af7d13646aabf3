"""
Gaussian primitives: jittered Cholesky, log densities, KL divergences,
reparameterised sampling and k-means for inducing-point initialisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.cluster.vq import vq
from scipy.spatial.distance import cdist

from Scripts.core.errors import NumericalError
from Scripts.core.logging_config import get_logger
from Scripts.diffmath import DTYPE, Value

logger = get_logger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)

# Multipliers applied to the base jitter, in order.
JITTER_LADDER: tuple[float, ...] = (0.0, 1.0, 10.0, 100.0)


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass
class FullGaussian:
    """N(mean, chol·cholᵀ) over a vector."""

    mean: Value
    chol: Value

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    @property
    def cov(self) -> Value:
        return self.chol @ self.chol.transpose(-1, -2)


@dataclass
class DiagGaussian:
    """Independent normals with element-wise mean and scale (any shape)."""

    mean: Value
    scale: Value

    @property
    def var(self) -> Value:
        return self.scale ** 2

    @classmethod
    def standard(cls, like: Value) -> "DiagGaussian":
        return cls(torch.zeros_like(like), torch.ones_like(like))


def _check_dims(a: int, b: int, what: str) -> None:
    if a != b:
        raise ValueError(f"{what}: dimension mismatch ({a} vs {b}).")


# ============================================================================
# CHOLESKY
# ============================================================================

def cholesky_jittered(A: Value, jitter: float = 1e-6) -> Value:
    """Lower Cholesky factor of ``A + j·I`` for the smallest j that works.

    j runs through 0, jitter, 10·jitter, 100·jitter.

    Raises:
        NumericalError: If every level fails.
    """
    n = A.shape[-1]
    eye = torch.eye(n, dtype=A.dtype)
    for mult in JITTER_LADDER:
        j = mult * jitter
        L, info = torch.linalg.cholesky_ex(A + j * eye if j else A)
        if int(info.max()) == 0:
            if j:
                logger.debug("cholesky_jittered: succeeded with jitter %.1e (n=%d)", j, n)
            return L
    raise NumericalError(
        f"Matrix of size {n} is not positive definite even with jitter {JITTER_LADDER[-1] * jitter:.1e}."
    )


def logdet_from_chol(L: Value) -> Value:
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


# ============================================================================
# DENSITIES AND DIVERGENCES
# ============================================================================

def mvn_logpdf(x: Value, g: FullGaussian) -> Value:
    """Exact log N(x | g.mean, g.cov)."""
    _check_dims(int(x.shape[-1]), g.dim, "mvn_logpdf")
    diff = (x - g.mean).unsqueeze(-1)
    alpha = torch.linalg.solve_triangular(g.chol, diff, upper=False)
    maha = (alpha ** 2).sum((-1, -2))
    return -0.5 * (g.dim * _LOG_2PI + logdet_from_chol(g.chol) + maha)


def kl_full(q: FullGaussian, p: FullGaussian) -> Value:
    """KL(q || p) for two full-covariance Gaussians of the same dimension."""
    _check_dims(q.dim, p.dim, "kl_full")
    n = q.dim
    A = torch.linalg.solve_triangular(p.chol, q.chol, upper=False)
    diff = (p.mean - q.mean).unsqueeze(-1)
    alpha = torch.linalg.solve_triangular(p.chol, diff, upper=False)
    trace = (A ** 2).sum((-1, -2))
    maha = (alpha ** 2).sum((-1, -2))
    kl = 0.5 * (trace + maha - n + logdet_from_chol(p.chol) - logdet_from_chol(q.chol))
    return kl.clamp_min(0.0)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Value:
    """KL(q || p) summed over every element of two diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"kl_diag: shape mismatch {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}.")
    ratio = q.var / p.var
    maha = (q.mean - p.mean) ** 2 / p.var
    kl = 0.5 * (ratio + maha - 1.0 - torch.log(ratio))
    return kl.sum()


# ============================================================================
# SAMPLING
# ============================================================================

def reparam_sample(g: FullGaussian | DiagGaussian, noise: Value) -> Value:
    """mean + chol·noise (full) or mean + scale⊙noise (diagonal)."""
    if isinstance(g, FullGaussian):
        _check_dims(int(noise.shape[-1]), g.dim, "reparam_sample")
        return g.mean + (g.chol @ noise.unsqueeze(-1)).squeeze(-1)
    if noise.shape[-g.mean.ndim:] != g.mean.shape:
        raise ValueError(
            f"reparam_sample: noise shape {tuple(noise.shape)} does not end with {tuple(g.mean.shape)}."
        )
    return g.mean + g.scale * noise


# ============================================================================
# K-MEANS
# ============================================================================

def kmeans(points: np.ndarray, k: int, iters: int = 50, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm started from k distinct data points drawn with ``seed``.

    Raises:
        ValueError: If there are fewer points than centres.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"kmeans needs 1 ≤ k ≤ N (got k={k}, N={n}).")

    rng = np.random.default_rng(seed)
    init = points[rng.choice(n, size=k, replace=False)].copy()
    if points.shape[1] == 0 or k == n:
        return init
    return lloyd(points, init, iters)


def lloyd(points: np.ndarray, centers: np.ndarray, iters: int) -> np.ndarray:
    """Refine ``centers`` by Lloyd iterations.

    A centre left without points is moved to the point farthest from its
    nearest centre.
    """
    centers = np.array(centers, dtype=np.float64)
    k = centers.shape[0]
    for _ in range(iters):
        labels, _ = vq(points, centers, check_finite=False)
        counts = np.bincount(labels, minlength=k)
        updated = np.zeros_like(centers)
        np.add.at(updated, labels, points)
        filled = counts > 0
        updated[filled] /= counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            nearest = cdist(points, updated[filled], "sqeuclidean").min(axis=1)
            for j in empty:
                far = int(np.argmax(nearest))
                updated[j] = points[far]
                nearest = np.minimum(nearest, ((points - points[far]) ** 2).sum(axis=1))
            logger.debug("kmeans: reseeded %d empty cluster(s)", empty.size)
        if np.array_equal(updated, centers):
            break
        centers = updated
    return centers


def kmeans_sse(points: np.ndarray, centers: np.ndarray) -> float:
    """Within-cluster sum of squared distances to the nearest centre."""
    return float(cdist(points, centers, "sqeuclidean").min(axis=1).sum())


def as_inducing(centers: np.ndarray) -> Value:
    return torch.as_tensor(centers, dtype=DTYPE)
