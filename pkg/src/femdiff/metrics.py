"""Ensemble evaluation: RMSE of the posterior mean, energy score, and the
unbiased maximum mean discrepancy. Norms are plain Euclidean over stacked
node values."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .fem import Field


@dataclass(frozen=True)
class SampleEnsemble:
    """K posterior samples for each of n observations, with their truths."""

    samples: tuple  # n tuples of K Fields
    truths: tuple  # n Fields

    def __post_init__(self):
        samples = tuple(tuple(group) for group in self.samples)
        truths = tuple(self.truths)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "truths", truths)
        if len(samples) != len(truths) or not samples:
            raise ValueError("need one non-empty sample group per truth")
        k = len(samples[0])
        shape = truths[0].values.shape
        for group, truth in zip(samples, truths):
            if len(group) != k or not k:
                raise ValueError("sample groups must share a positive size K")
            if any(f.values.shape != shape for f in group) or truth.values.shape != shape:
                raise ValueError("inconsistent field shapes in ensemble")

    @property
    def n_observations(self) -> int:
        return len(self.truths)

    @property
    def k_samples(self) -> int:
        return len(self.samples[0])


def _flat(f: Field) -> np.ndarray:
    return f.values.ravel()


def rmse_posterior_mean(ens: SampleEnsemble) -> float:
    """sqrt of the mean over observations of ||truth - ensemble mean||^2."""
    total = 0.0
    for group, truth in zip(ens.samples, ens.truths):
        mean = np.mean([_flat(f) for f in group], axis=0)
        total += float(np.sum((_flat(truth) - mean) ** 2))
    return float(np.sqrt(total / ens.n_observations))


def energy_score(ens: SampleEnsemble) -> float:
    """Mean over observations of
    (1/K) sum_k ||s_k - truth|| - (1/2K^2) sum_{k,l} ||s_k - s_l||;
    the double sum runs over all pairs including k = l."""
    scores = []
    for group, truth in zip(ens.samples, ens.truths):
        mat = np.stack([_flat(f) for f in group])
        t = _flat(truth)
        k = len(mat)
        term1 = np.mean(np.linalg.norm(mat - t, axis=1))
        diffs = mat[:, None, :] - mat[None, :, :]
        term2 = np.sum(np.linalg.norm(diffs, axis=2)) / (2.0 * k * k)
        scores.append(term1 - term2)
    return float(np.mean(scores))


class MMDResult(NamedTuple):
    squared: float  # unbiased U-statistic, may be negative
    root: float  # sign-preserving sqrt(|squared|)


def mmd_unbiased(x_fields, z_fields, length_scale: float = 10.0) -> MMDResult:
    """Unbiased squared MMD between two sample sets under the Gaussian
    kernel exp(-||x - z||^2 / (2 l^2)); within-set sums skip the diagonal."""
    x = np.stack([_flat(f) for f in x_fields])
    z = np.stack([_flat(f) for f in z_fields])
    m, n = len(x), len(z)
    if m < 2 or n < 2:
        raise ValueError("both sets need at least two samples")

    def gram(a, b):
        d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * length_scale**2))

    kxx = gram(x, x)
    kzz = gram(z, z)
    kxz = gram(x, z)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_z = (kzz.sum() - np.trace(kzz)) / (n * (n - 1))
    term_xz = 2.0 * kxz.sum() / (m * n)
    squared = float(term_x + term_z - term_xz)
    return MMDResult(squared, float(np.sign(squared) * np.sqrt(abs(squared))))
