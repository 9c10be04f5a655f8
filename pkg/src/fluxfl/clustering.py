"""Unsupervised grouping of client descriptors.

``dbscan_adaptive`` picks its radius from the sorted second-nearest-neighbour
curve, runs DBSCAN with ``min_samples=2`` and turns every noise point into
its own cluster. ``kmeans_prior`` is the variant that is told the true number
of distributions. Cluster ids are always renumbered by each cluster's
smallest member index, so outputs do not depend on discovery order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .descriptor import DescriptorVector
from .numcore import ConfigurationError, RngStream

GAP_MIN_RATIO = 3.0


@dataclass
class ClusterState:
    M: int
    assignment: np.ndarray
    centroids: np.ndarray  # label-free prefixes, M x prefix_len
    full_centroids: np.ndarray  # whole descriptors, M x L
    epsilon: float | None = None
    inertia_history: list[float] = field(default_factory=list)

    def members(self, m: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == m)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignment == m)) for m in range(self.M)]


def _points(descriptors, prefix_len: int | None = None) -> tuple[np.ndarray, int]:
    if len(descriptors) and isinstance(descriptors[0], DescriptorVector):
        full = np.stack([d.values for d in descriptors])
        return full, descriptors[0].prefix_len
    full = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    return full, full.shape[1] if prefix_len is None else prefix_len


def _pairwise(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def canonical_labels(labels) -> np.ndarray:
    """Renumber ids by ascending smallest member index."""
    labels = np.asarray(labels)
    order: dict[int, int] = {}
    out = np.empty(labels.size, dtype=np.int64)
    for i, lab in enumerate(labels.tolist()):
        if lab not in order:
            order[lab] = len(order)
        out[i] = order[lab]
    return out


def build_state(full: np.ndarray, prefix_len: int, labels, epsilon: float | None = None) -> ClusterState:
    assignment = canonical_labels(labels)
    M = int(assignment.max()) + 1 if assignment.size else 0
    centroids = np.stack([full[assignment == m, :prefix_len].mean(axis=0) for m in range(M)])
    full_centroids = np.stack([full[assignment == m].mean(axis=0) for m in range(M)])
    return ClusterState(M, assignment, centroids, full_centroids, epsilon)


def second_nn_curve(descriptors) -> np.ndarray:
    """Sorted distances from each point to its second-nearest other point."""
    x, _ = _points(descriptors)
    n = x.shape[0]
    if n < 3:
        raise ConfigurationError("too few clients to calibrate epsilon")
    d = _pairwise(x)
    d[np.arange(n), np.arange(n)] = np.inf
    return np.sort(np.sort(d, axis=1)[:, 1])


def kneedle_index(curve) -> int:
    """Argmax of normalised value minus normalised position (first max on ties)."""
    c = np.asarray(curve, dtype=np.float64)
    span = c[-1] - c[0]
    if span <= 0:
        return 0
    x = np.arange(c.size) / (c.size - 1)
    y = (c - c[0]) / span
    return int(np.argmax(y - x))


def gap_index(curve, min_ratio: float = GAP_MIN_RATIO) -> int:
    """Index just before the largest multiplicative jump, or the last index when no jump reaches ``min_ratio``.

    A jump marks the switch from intra-group to inter-group distances; with
    no such switch the whole curve belongs to one density regime and its
    maximum is the radius that keeps every group connected.
    """
    c = np.asarray(curve, dtype=np.float64)
    lo, hi = c[:-1], c[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(lo > 0, hi / np.where(lo > 0, lo, 1.0), np.where(hi > 0, np.inf, 1.0))
    i = int(np.argmax(ratios))
    return i if ratios[i] >= min_ratio else c.size - 1


def elbow_epsilon(curve, scale: float = 1.0, method: str = "gap") -> float:
    c = np.asarray(curve, dtype=np.float64)
    if c.size < 3:
        raise ConfigurationError("elbow detection needs at least 3 points")
    if np.any(np.diff(c) < 0):
        raise ConfigurationError("curve must be sorted ascending")
    if c[-1] == c[0]:
        return float(c[0] * scale)
    if method == "kneedle":
        idx = kneedle_index(c)
    elif method == "gap":
        idx = gap_index(c)
    else:
        raise ConfigurationError(f"unknown elbow method {method!r}")
    return float(c[idx] * scale)


def dbscan_labels(x: np.ndarray, eps: float, min_samples: int = 2) -> np.ndarray:
    """Plain DBSCAN with closed eps-balls; noise points become singletons.

    Border points join the cluster of their lowest-index core neighbour.
    """
    n = x.shape[0]
    near = _pairwise(x) <= eps
    core = near.sum(axis=1) >= min_samples
    labels = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for start in range(n):
        if not core[start] or labels[start] >= 0:
            continue
        labels[start] = next_id
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j in np.flatnonzero(near[i] & core):
                if labels[j] < 0:
                    labels[j] = next_id
                    queue.append(j)
        next_id += 1
    for i in range(n):
        if labels[i] >= 0:
            continue
        neigh = np.flatnonzero(near[i] & core)
        if neigh.size:
            labels[i] = labels[neigh[0]]
        else:
            labels[i] = next_id
            next_id += 1
    return canonical_labels(labels)


def dbscan_adaptive(descriptors, scale: float = 1.0, method: str = "gap",
                    prefix_len: int | None = None) -> ClusterState:
    full, plen = _points(descriptors, prefix_len)
    n = full.shape[0]
    if n < 3:
        return build_state(full, plen, np.arange(n), None)
    eps = elbow_epsilon(second_nn_curve(full), scale, method)
    return build_state(full, plen, dbscan_labels(full, eps), eps)


def _nearest(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(x.shape[0]), idx]


def kmeans_prior(descriptors, M: int, seed: int, max_iter: int = 100,
                 prefix_len: int | None = None) -> ClusterState:
    """Lloyd's k-means with k-means++ seeding from a SplitMix64 stream."""
    full, plen = _points(descriptors, prefix_len)
    n = full.shape[0]
    if M <= 0:
        raise ConfigurationError("M must be positive")
    if M > n:
        raise ConfigurationError(f"M = {M} exceeds the number of clients {n}")
    rng = RngStream(seed)
    centers = [full[int(rng.integers(n, 1)[0])]]
    for _ in range(1, M):
        _, d2 = _nearest(full, np.stack(centers))
        total = d2.sum()
        if total <= 0:
            pick = len(centers)
        else:
            cum = np.cumsum(d2)
            pick = int(np.searchsorted(cum, rng.uniform() * total, side="right"))
            pick = min(pick, n - 1)
        centers.append(full[pick])
    centers = np.stack(centers)

    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        new_labels, d2 = _nearest(full, centers)
        # Repair empty clusters by taking the point worst served by its centroid.
        for m in range(M):
            if np.any(new_labels == m):
                continue
            counts = np.bincount(new_labels, minlength=M)
            candidates = np.flatnonzero(counts[new_labels] > 1)
            far = candidates[np.argmax(d2[candidates])]
            new_labels[far] = m
            d2[far] = 0.0
            centers[m] = full[far]
        centers = np.stack([full[new_labels == m].mean(axis=0) for m in range(M)])
        history.append(float(np.sum((full - centers[new_labels]) ** 2)))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    state = build_state(full, plen, labels)
    state.inertia_history = history
    return state


def assign_nearest_centroid(d_prime, centroids) -> int:
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if c.size == 0:
        raise ConfigurationError("no centroids to assign to")
    v = d_prime.values if isinstance(d_prime, DescriptorVector) else np.asarray(d_prime, dtype=np.float64)
    if v.size != c.shape[1]:
        raise ConfigurationError(f"descriptor length {v.size} does not match centroid length {c.shape[1]}")
    return int(np.argmin(np.linalg.norm(c - v, axis=1)))
