"""Closed-form 2-Wasserstein distance between diagonal Gaussians.

With commuting (here: diagonal) covariances the Bures term reduces to the
Frobenius distance between matrix square roots, i.e. the Euclidean distance
between standard-deviation vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import ConfigurationError


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        sigma = np.asarray(self.sigma, dtype=np.float64).ravel()
        if mean.shape != sigma.shape:
            raise ConfigurationError("mean and sigma must have the same length")
        if not (np.all(np.isfinite(sigma)) and np.all(sigma >= 0)):
            raise ConfigurationError("sigma entries must be finite and non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variances(self) -> np.ndarray:
        return self.sigma**2


def _check_dims(a: GaussianSummary, b: GaussianSummary) -> None:
    if a.dim != b.dim:
        raise ConfigurationError(f"dimension mismatch: {a.dim} vs {b.dim}")


def w2_gaussian_diag_sq(a: GaussianSummary, b: GaussianSummary) -> float:
    _check_dims(a, b)
    return float(np.sum((a.mean - b.mean) ** 2) + np.sum((a.sigma - b.sigma) ** 2))


def w2_gaussian_diag(a: GaussianSummary, b: GaussianSummary) -> float:
    return math.sqrt(w2_gaussian_diag_sq(a, b))


def prop1_constants(lambda_min: float, lambda_max: float) -> tuple[float, float]:
    """Lower/upper Lipschitz constants relating W2 to the moment distance.

    ``c_minus = min(1, 1/(2 sqrt(lambda_max)))``,
    ``c_plus = max(1, 1/(2 sqrt(lambda_min)))``.
    """
    if not (lambda_min > 0 and lambda_max >= lambda_min):
        raise ConfigurationError("need 0 < lambda_min <= lambda_max")
    c_minus = min(1.0, 1.0 / (2.0 * math.sqrt(lambda_max)))
    c_plus = max(1.0, 1.0 / (2.0 * math.sqrt(lambda_min)))
    return c_minus, c_plus


def moment_distance_sq(a: GaussianSummary, b: GaussianSummary) -> float:
    """Squared mean distance plus squared Frobenius distance of the (diagonal) covariances."""
    _check_dims(a, b)
    return float(np.sum((a.mean - b.mean) ** 2) + np.sum((a.variances - b.variances) ** 2))


def check_prop1_bound(a: GaussianSummary, b: GaussianSummary, lambda_min: float,
                      lambda_max: float, tol: float = 1e-12) -> tuple[float, float, bool]:
    """Return ``(delta_sq, w2_sq, holds)`` for ``c-^2 delta^2 <= W2^2 <= c+^2 delta^2``.

    Raises if any variance lies outside ``[lambda_min, lambda_max]``.
    """
    c_minus, c_plus = prop1_constants(lambda_min, lambda_max)
    for g in (a, b):
        v = g.variances
        # Relative slack absorbs the round trip sigma -> sigma**2.
        if np.any(v < lambda_min * (1 - 1e-12)) or np.any(v > lambda_max * (1 + 1e-12)):
            raise ConfigurationError("variances outside [lambda_min, lambda_max]")
    delta_sq = moment_distance_sq(a, b)
    w2_sq = w2_gaussian_diag_sq(a, b)
    slack = tol * max(1.0, delta_sq)
    holds = (c_minus**2 * delta_sq <= w2_sq + slack) and (w2_sq <= c_plus**2 * delta_sq + slack)
    return delta_sq, w2_sq, bool(holds)
