"""Trace-class Gaussian noise: RBF kernel matrix over node positions, its
Cholesky factor, sampling, and application."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .errors import NotPositiveDefinite
from .fem import Field

DEFAULT_JITTER = 1e-6
_MAX_JITTER_DOUBLINGS = 8


def rbf_kernel(x, y, length_scale: float) -> float:
    """exp(-|x - y|^2 / (2 l^2)); equals 1 at x = y."""
    if not length_scale > 0:
        raise ValueError("length scale must be positive")
    d2 = float(np.sum((np.asarray(x, float) - np.asarray(y, float)) ** 2))
    return float(np.exp(-d2 / (2.0 * length_scale**2)))


@dataclass(frozen=True)
class CovarianceFactor:
    """RBF kernel matrix over node positions with its lower Cholesky factor
    of kernel + jitter*I."""

    length_scale: float
    kernel: np.ndarray  # (N, N), unit diagonal
    chol: np.ndarray  # lower triangular
    jitter: float
    graph_ref: str | None = None

    @property
    def n_nodes(self) -> int:
        return self.kernel.shape[0]


def build_covariance(
    positions,
    length_scale: float,
    jitter: float = DEFAULT_JITTER,
    graph_ref: str | None = None,
) -> CovarianceFactor:
    """Assemble and factor the node-kernel matrix; the jitter is doubled up
    to 8 times if the factorization fails."""
    if not length_scale > 0:
        raise ValueError("length scale must be positive")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    d2 = cdist(pos, pos, "sqeuclidean")
    kernel = np.exp(-d2 / (2.0 * length_scale**2))
    kernel = 0.5 * (kernel + kernel.T)

    jit = jitter
    for _ in range(_MAX_JITTER_DOUBLINGS + 1):
        try:
            chol = np.linalg.cholesky(kernel + jit * np.eye(len(pos)))
            kernel.setflags(write=False)
            chol.setflags(write=False)
            return CovarianceFactor(float(length_scale), kernel, chol, jit, graph_ref)
        except np.linalg.LinAlgError:
            jit = max(jit * 2.0, DEFAULT_JITTER)
    raise NotPositiveDefinite(
        f"kernel not factorable after jitter escalation to {jit:g}"
    )


def draw(factor: CovarianceFactor, columns: int, rng: np.random.Generator) -> np.ndarray:
    """Matrix of `columns` independent N(0, C) draws, one per column."""
    z = rng.standard_normal((factor.n_nodes, columns))
    return factor.chol @ z


def sample_grf(factor: CovarianceFactor, count: int, rng: np.random.Generator) -> list[Field]:
    """Independent single-channel Gaussian random fields, L @ z per sample."""
    samples = draw(factor, count, rng)
    return [Field(samples[:, i : i + 1], factor.graph_ref) for i in range(count)]


def apply_C(factor: CovarianceFactor, v):
    """Apply the covariance operator (kernel matrix, jitter excluded)."""
    if isinstance(v, Field):
        if v.n_nodes != factor.n_nodes:
            raise ValueError(
                f"field has {v.n_nodes} nodes, covariance has {factor.n_nodes}"
            )
        return Field(factor.kernel @ v.values, v.graph_ref)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != factor.n_nodes:
        raise ValueError(f"length {v.shape[0]} does not match {factor.n_nodes} nodes")
    return factor.kernel @ v


def whiten(factor: CovarianceFactor, values: np.ndarray) -> np.ndarray:
    """Invert the factor: recovers the standard normal vector of a draw."""
    return solve_triangular(factor.chol, values, lower=True)
