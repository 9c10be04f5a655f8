"""Slow, independent reference implementations used to cross-check fast paths."""

from __future__ import annotations

import math

import numpy as np

from ..numcore import ConfigurationError, sym_sqrt


def bures_sq(cov_a, cov_b) -> float:
    """Squared Bures distance ``Tr(A + B - 2 (A^1/2 B A^1/2)^1/2)`` for general PSD matrices."""
    a = np.asarray(cov_a, dtype=np.float64)
    b = np.asarray(cov_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigurationError("covariances must be square and of equal shape")
    ra = sym_sqrt(a)
    cross = sym_sqrt(ra @ b @ ra)
    return float(max(np.trace(a) + np.trace(b) - 2.0 * np.trace(cross), 0.0))


def w2_gaussian_sq(mean_a, cov_a, mean_b, cov_b) -> float:
    """Squared 2-Wasserstein distance between two Gaussians with full covariances."""
    dm = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    return float(dm @ dm) + bures_sq(cov_a, cov_b)


def w2_gaussian(mean_a, cov_a, mean_b, cov_b) -> float:
    return math.sqrt(w2_gaussian_sq(mean_a, cov_a, mean_b, cov_b))


def random_rotation(dim: int, normals: np.ndarray) -> np.ndarray:
    """Orthogonal matrix from a Gram-Schmidt pass over ``dim*dim`` normal draws."""
    g = np.asarray(normals, dtype=np.float64).reshape(dim, dim)
    q = np.zeros_like(g)
    for j in range(dim):
        v = g[:, j].copy()
        for i in range(j):
            v -= (q[:, i] @ g[:, j]) * q[:, i]
        q[:, j] = v / np.linalg.norm(v)
    return q


def reference_dbscan(x, eps: float, min_samples: int = 2) -> np.ndarray:
    """DBSCAN via union-find over core points, noise promoted to singletons.

    Written independently of the BFS version in the clustering module; labels
    are canonical (numbered by smallest member index).
    """
    pts = np.asarray(x, dtype=np.float64)
    n = pts.shape[0]
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    adj = dist <= eps
    core = adj.sum(1) >= min_samples
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if core[i] and core[j] and adj[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    root = [find(i) if core[i] else -1 for i in range(n)]
    for i in range(n):
        if not core[i]:
            cores = [j for j in range(n) if core[j] and adj[i, j]]
            root[i] = root[cores[0]] if cores else n + i
    out = np.empty(n, dtype=np.int64)
    seen: dict[int, int] = {}
    for i, r in enumerate(root):
        out[i] = seen.setdefault(r, len(seen))
    return out


def same_partition(a, b) -> bool:
    """True when two labelings group the points identically (ids may differ)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    return bool(np.array_equal(a[:, None] == a[None, :], b[:, None] == b[None, :]))


def finite_difference_grad(f, params: np.ndarray, index: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at selected coordinates."""
    out = np.empty(index.size)
    for n, i in enumerate(index):
        up = params.copy()
        up[i] += h
        down = params.copy()
        down[i] -= h
        out[n] = (f(up) - f(down)) / (2.0 * h)
    return out
