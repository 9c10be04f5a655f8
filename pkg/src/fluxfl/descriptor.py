"""Client distribution descriptors.

A descriptor summarises a client's latent representations in a reduced space
shared by the whole federation:

1. each client reports the coordinate-wise min/max of its latents; the
   server merges them into one alignment box;
2. every party samples the same synthetic points from that box (shared
   seed) and fits the same PCA projection;
3. the client computes per-coordinate means and standard deviations of its
   projected latents, overall and per class;
4. optionally, each coordinate receives Laplace noise for differential
   privacy.

Layout: ``[mu_x, sigma_x, mu_1, sigma_1, ..., mu_U, sigma_U]``. The first
block pair never uses labels, so it doubles as the test-time descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ConfigurationError, RngStream, as_matrix, jacobi_eigh

DEFAULT_PCA_POINTS = 200
DEFAULT_PCA_DIM = 10


@dataclass(frozen=True)
class AlignmentBounds:
    m_minus: np.ndarray
    m_plus: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.m_minus, dtype=np.float64).ravel()
        hi = np.asarray(self.m_plus, dtype=np.float64).ravel()
        if lo.shape != hi.shape:
            raise ConfigurationError("bounds dimension mismatch")
        if np.any(lo > hi):
            raise ConfigurationError("m_minus must not exceed m_plus")
        object.__setattr__(self, "m_minus", lo)
        object.__setattr__(self, "m_plus", hi)

    @property
    def width(self) -> np.ndarray:
        return self.m_plus - self.m_minus


def local_bounds(latents) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("local_bounds needs a non-empty latent matrix")
    return x.min(axis=0), x.max(axis=0)


def merge_bounds(pairs) -> AlignmentBounds:
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("merge_bounds needs at least one (min, max) pair")
    dim = np.asarray(pairs[0][0]).shape
    for lo, hi in pairs:
        if np.asarray(lo).shape != dim or np.asarray(hi).shape != dim:
            raise ConfigurationError("bounds dimension mismatch")
    lo = np.min(np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs]), axis=0)
    hi = np.max(np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs]), axis=0)
    return AlignmentBounds(lo, hi)


@dataclass(frozen=True)
class PcaMap:
    mean: np.ndarray
    components: np.ndarray  # l x v, orthonormal rows

    @property
    def l(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    def project(self, latents) -> np.ndarray:
        x = as_matrix(latents, cols=self.input_dim, name="latents")
        return (x - self.mean) @ self.components.T

    def projected_width(self, bounds: AlignmentBounds) -> np.ndarray:
        """Extent of the alignment box along each component."""
        return np.abs(self.components) @ bounds.width


def fit_shared_pca(bounds: AlignmentBounds, n_points: int = DEFAULT_PCA_POINTS, l: int = DEFAULT_PCA_DIM,
                   shared_seed: int = 0) -> PcaMap:
    """PCA fitted on synthetic points drawn uniformly from the alignment box.

    Deterministic in ``(bounds, n_points, l, shared_seed)``; each component's
    largest-magnitude entry is made positive.
    """
    v = bounds.m_minus.size
    if l > v:
        raise ConfigurationError(f"l = {l} exceeds latent dimension {v}")
    if n_points <= l:
        raise ConfigurationError("n_points must exceed l")
    if not np.any(bounds.width > 0):
        raise ConfigurationError("zero-volume alignment box")
    rng = RngStream(shared_seed)
    pts = bounds.m_minus + rng.uniforms(n_points * v).reshape(n_points, v) * bounds.width
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / (n_points - 1)
    _, vecs = jacobi_eigh(cov)
    comps = vecs[:, :l].T.copy()
    for i in range(l):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaMap(mean, comps)


@dataclass(frozen=True)
class DescriptorLayout:
    """Which blocks a descriptor carries (ablation knobs)."""

    l: int
    num_classes: int
    use_sigma: bool = True
    use_class_blocks: bool = True

    @property
    def block_len(self) -> int:
        return self.l * (2 if self.use_sigma else 1)

    @property
    def prefix_len(self) -> int:
        return self.block_len

    @property
    def length(self) -> int:
        return self.block_len * (1 + (self.num_classes if self.use_class_blocks else 0))

    def sigma_mask(self) -> np.ndarray:
        """True where the coordinate is a standard deviation."""
        block = np.zeros(self.block_len, dtype=bool)
        if self.use_sigma:
            block[self.l:] = True
        return np.tile(block, self.length // self.block_len)


@dataclass(frozen=True)
class DescriptorVector:
    values: np.ndarray
    prefix_len: int
    sample_count: int
    dp_epsilon: float | None = None

    @property
    def label_free(self) -> np.ndarray:
        return self.values[: self.prefix_len]

    def __len__(self) -> int:
        return self.values.size

    def to_list(self) -> list[float]:
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class DpConfig:
    epsilon: float
    bounds: AlignmentBounds

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("dp_epsilon must be positive")


def _moments(z: np.ndarray, use_sigma: bool) -> np.ndarray:
    mu = z.mean(axis=0)
    if not use_sigma:
        return mu
    sd = np.sqrt(np.mean((z - mu) ** 2, axis=0))
    return np.concatenate([mu, sd])


def laplace_noise(rng: RngStream, scales) -> np.ndarray:
    """Zero-mean Laplace draws with per-coordinate scale, by inverse CDF (one uniform each)."""
    b = np.asarray(scales, dtype=np.float64)
    u = rng.open_uniforms(b.size) - 0.5
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_scales(pca: PcaMap, bounds: AlignmentBounds, layout: DescriptorLayout,
                   sample_count: int, epsilon: float) -> np.ndarray:
    """Per-coordinate noise scale ``Range / (s * epsilon)``.

    Mean coordinates use the box width along the component; standard
    deviations can vary by at most half of it.
    """
    width = pca.projected_width(bounds)
    if layout.use_sigma:
        block = np.concatenate([width, 0.5 * width])
    else:
        block = width
    ranges = np.tile(block, layout.length // layout.block_len)
    return ranges / (sample_count * epsilon)


def extract_descriptor(latents, labels, num_classes: int, pca: PcaMap, dp: DpConfig | None = None,
                       rng: RngStream | None = None, use_sigma: bool = True,
                       use_class_blocks: bool = True) -> DescriptorVector:
    """Descriptor of one client. Pass ``labels=None`` for the label-free variant.

    Classes absent from ``labels`` (and all classes when labels are withheld)
    contribute zero blocks. A class with a single sample gets sigma 0.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError("descriptor extraction needs at least 2 latent rows")
    layout = DescriptorLayout(pca.l, num_classes, use_sigma, use_class_blocks)
    z = pca.project(x)
    blocks = [_moments(z, use_sigma)]
    if use_class_blocks:
        y = None if labels is None else np.asarray(labels, dtype=np.int64)
        if y is not None:
            if y.shape != (x.shape[0],):
                raise ConfigurationError("labels must match latent rows")
            if y.size and (y.min() < 0 or y.max() >= num_classes):
                raise ConfigurationError(f"labels must lie in [0, {num_classes})")
        for u in range(num_classes):
            rows = None if y is None else z[y == u]
            if rows is None or rows.shape[0] == 0:
                blocks.append(np.zeros(layout.block_len))
            else:
                blocks.append(_moments(rows, use_sigma))
    values = np.concatenate(blocks)
    s = x.shape[0]
    eps = None
    if dp is not None:
        if rng is None:
            raise ConfigurationError("differential privacy needs an rng stream")
        values = values + laplace_noise(rng, laplace_scales(pca, dp.bounds, layout, s, dp.epsilon))
        eps = float(dp.epsilon)
    return DescriptorVector(values, layout.prefix_len, s, eps)


def descriptor_distance(a, b, label_free: bool = False) -> float:
    va = a.values if isinstance(a, DescriptorVector) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, DescriptorVector) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ConfigurationError(f"descriptor length mismatch: {va.size} vs {vb.size}")
    if label_free:
        n = a.prefix_len if isinstance(a, DescriptorVector) else va.size
        va, vb = va[:n], vb[:n]
    return float(np.linalg.norm(va - vb))


def descriptor_length(num_classes: int, l: int = DEFAULT_PCA_DIM) -> int:
    return 2 * (num_classes + 1) * l
