"""Dense linear algebra helpers.

Matrices are plain float64 numpy arrays; this module adds the few routines
whose exact numerical path must be fixed for reproducibility.
"""

from __future__ import annotations

import numpy as np


class ConfigurationError(ValueError):
    """Inputs have the wrong shape or violate a documented precondition."""


def as_matrix(x, cols: int | None = None, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ConfigurationError(f"{name} has {a.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of a round-robin tournament: n-1 steps covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    steps = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        steps.append((np.array([p for p, _ in pairs], dtype=np.intp),
                      np.array([q for _, q in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return steps


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the disjoint rotations of one step are applied as a single
    orthogonal matrix. Iteration stops once the off-diagonal Frobenius norm
    drops below ``tol`` times the matrix norm.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue,
    eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ConfigurationError(f"expected a square matrix, got shape {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n > 1 and scale > 0.0:
        steps = _round_robin(n)
        for _ in range(max_sweeps):
            off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
            if off <= tol * scale:
                break
            for p, q in steps:
                apq = a[p, q]
                active = np.abs(apq) > 1e-300
                if not np.any(active):
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                t = np.where(active, np.sign(theta + (theta == 0)) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a = 0.5 * (a + a.T)
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def sym_sqrt(a) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    w, v = jacobi_eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
