"""Federations of client datasets with controlled distribution shift.

Four shift families are supported, each at heterogeneity levels 1-8:

* ``feature``: every client of a distribution sees the same global
  transform, a rotation in the (x0, x1) plane plus an additive "colour"
  offset on one third of the coordinates.
* ``label``: a distribution keeps only a subset of the classes, drawn from
  a bank of five subsets.
* ``concept_y_given_x``: labels inside a swapping pool are permuted.
* ``concept_x_given_y``: samples of selected classes are rotated by a
  distribution-specific angle.

Synthetic data is a mixture of isotropic Gaussian class blobs. MNIST IDX
files can be loaded and partitioned with the same shift plans, restricted to
right-angle rotations.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import ConfigurationError, RngStream

DATASET_MAGIC = b"FLUXDS1"
_HEADER = struct.Struct("<IIII")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

COLORS = ("original", "red", "green", "blue")
# Rotation menus per level (levels 5-8 repeat 1-4 with three colours).
_ROTATIONS = {
    1: (0, 180),
    2: (0, 120, 240),
    3: (0, 90, 180, 270),
    4: (0, 72, 144, 216, 288),
}
_RIGHT_ANGLES = (0, 90, 180, 270)
LABEL_BANK_SIZE = 5


class ShiftType(str, enum.Enum):
    NONE = "none"
    FEATURE = "feature"
    LABEL = "label"
    CONCEPT_Y_GIVEN_X = "concept_y_given_x"
    CONCEPT_X_GIVEN_Y = "concept_x_given_y"

    @classmethod
    def parse(cls, value) -> ShiftType:
        if isinstance(value, ShiftType):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "featureshift": cls.FEATURE,
            "labelshift": cls.LABEL,
            "conceptygivenx": cls.CONCEPT_Y_GIVEN_X,
            "conceptxgiveny": cls.CONCEPT_X_GIVEN_Y,
            "noshift": cls.NONE,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(t.value for t in cls)
            raise ConfigurationError(f"shift_type: unknown value {value!r} (expected one of {names})") from None


@dataclass(frozen=True)
class ShiftSpec:
    shift_type: ShiftType
    level: int = 1
    num_distributions: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shift_type", ShiftType.parse(self.shift_type))
        if not 1 <= int(self.level) <= 8:
            raise ConfigurationError(f"level: must be in [1, 8], got {self.level}")
        if int(self.num_distributions) < 1:
            raise ConfigurationError("num_distributions: must be >= 1")

    def to_dict(self) -> dict:
        return {"shift_type": self.shift_type.value, "level": int(self.level),
                "num_distributions": int(self.num_distributions)}


@dataclass(frozen=True)
class DistributionTransform:
    """Everything that distinguishes one distribution from the unshifted data."""

    rotation: int = 0
    color: str = "original"
    classes: tuple[int, ...] | None = None
    label_map: tuple[int, ...] | None = None
    class_rotations: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation,
            "color": self.color,
            "classes": list(self.classes) if self.classes is not None else None,
            "label_map": list(self.label_map) if self.label_map is not None else None,
            "class_rotations": {str(k): v for k, v in sorted(self.class_rotations.items())},
        }


@dataclass(frozen=True)
class ShiftPlan:
    spec: ShiftSpec
    num_classes: int
    transforms: tuple[DistributionTransform, ...]

    def allowed_classes(self, dist: int) -> np.ndarray:
        t = self.transforms[dist]
        if t.classes is None:
            return np.arange(self.num_classes)
        return np.asarray(t.classes, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "num_classes": self.num_classes,
                "transforms": [t.to_dict() for t in self.transforms]}


def rotation_menu(level: int) -> tuple[int, ...]:
    return _ROTATIONS[(level - 1) % 4 + 1]


def color_menu(level: int) -> tuple[str, ...]:
    return ("original",) if level <= 4 else ("red", "green", "blue")


def _random_derangement(pool: np.ndarray, rng: RngStream) -> np.ndarray:
    while True:
        perm = pool[rng.permutation(pool.size)]
        if not np.any(perm == pool):
            return perm


def build_shift_plan(spec: ShiftSpec, num_classes: int, seed: int,
                     right_angles_only: bool = False) -> ShiftPlan:
    """Resolve a shift spec into one concrete transform per distribution.

    Raises ConfigurationError when the spec cannot be realised, e.g. more
    distributions than distinct transforms or fewer than two kept classes.
    """
    U = int(num_classes)
    M = spec.num_distributions
    level = spec.level
    kind = spec.shift_type
    rng = RngStream.derived(seed, "shift-plan", kind.value, level)
    transforms: list[DistributionTransform] = []

    if kind is ShiftType.NONE:
        transforms = [DistributionTransform() for _ in range(M)]
    elif kind is ShiftType.FEATURE:
        rotations, colors = rotation_menu(level), color_menu(level)
        if right_angles_only:
            if colors != ("original",):
                raise ConfigurationError(f"level: colour shifts (level {level}) are not available for image data")
            if any(r not in _RIGHT_ANGLES for r in rotations):
                raise ConfigurationError(f"level: level {level} needs non-right-angle rotations, unsupported for image data")
        if M > len(rotations) * len(colors):
            raise ConfigurationError(
                f"num_distributions: level {level} feature shift offers only {len(rotations) * len(colors)} distinct transforms"
            )
        for m in range(M):
            transforms.append(DistributionTransform(rotation=rotations[(m // len(colors)) % len(rotations)],
                                                    color=colors[m % len(colors)]))
    elif kind is ShiftType.LABEL:
        keep = U + 1 - level
        if keep < 2:
            raise ConfigurationError(f"level: label shift level {level} leaves {keep} classes out of {U}")
        if M > LABEL_BANK_SIZE:
            raise ConfigurationError(f"num_distributions: label shift bank holds only {LABEL_BANK_SIZE} subsets")
        bank: list[tuple[int, ...]] = []
        distinct_possible = math.comb(U, keep)
        for _ in range(LABEL_BANK_SIZE):
            for _attempt in range(64):
                subset = tuple(sorted(int(c) for c in rng.choice(U, keep)))
                if subset not in bank or len(set(bank)) >= distinct_possible:
                    break
            bank.append(subset)
        transforms = [DistributionTransform(classes=bank[m]) for m in range(M)]
    elif kind is ShiftType.CONCEPT_Y_GIVEN_X:
        if level > U:
            raise ConfigurationError(f"level: swapping pool of {level} exceeds {U} classes")
        pool = np.sort(rng.choice(U, level))
        seen: list[tuple[int, ...]] = []
        n_derangements = _count_derangements(level)
        for m in range(M):
            label_map = np.arange(U)
            if level >= 2:
                for _attempt in range(256):
                    perm = _random_derangement(pool, rng)
                    if tuple(perm) not in seen or len(seen) >= n_derangements:
                        break
                seen.append(tuple(int(p) for p in perm))
                label_map[pool] = perm
            transforms.append(DistributionTransform(label_map=tuple(int(v) for v in label_map)))
    elif kind is ShiftType.CONCEPT_X_GIVEN_Y:
        if level > U:
            raise ConfigurationError(f"level: {level} augmented classes exceed {U} classes")
        if M > len(_RIGHT_ANGLES):
            raise ConfigurationError(f"num_distributions: at most {len(_RIGHT_ANGLES)} distinct rotations per class")
        augmented = sorted(int(c) for c in rng.choice(U, level))
        for m in range(M):
            rot = {c: _RIGHT_ANGLES[(m + j) % 4] for j, c in enumerate(augmented)}
            transforms.append(DistributionTransform(class_rotations=rot))
    return ShiftPlan(spec, U, tuple(transforms))


def _count_derangements(n: int) -> int:
    d = [1, 0]
    for i in range(2, n + 1):
        d.append((i - 1) * (d[-1] + d[-2]))
    return d[n]


@dataclass
class ClientDataset:
    """One client's samples. Rows ``[:n_train]`` train, the rest validate."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    n_train: int
    distribution_id: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        s = self.labels.size
        if self.features.shape[0] != s:
            raise ConfigurationError("features and labels disagree on sample count")
        if s < 2:
            raise ConfigurationError("a client needs at least 2 samples")
        if not 1 <= self.n_train <= s:
            raise ConfigurationError("train split must be within the sample count")

    @property
    def num_samples(self) -> int:
        return int(self.labels.size)

    @property
    def train_x(self) -> np.ndarray:
        return self.features[: self.n_train]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[: self.n_train]

    @property
    def val_x(self) -> np.ndarray:
        return self.features[self.n_train:]

    @property
    def val_y(self) -> np.ndarray:
        return self.labels[self.n_train:]


def split_point(n: int, train_fraction: float = 0.8) -> int:
    return min(max(int(math.floor(n * train_fraction)), 1), n)


@dataclass
class Federation:
    clients: list[ClientDataset]
    test_clients: list[ClientDataset]
    plan: ShiftPlan
    num_classes: int
    dim: int
    seed: int
    generator: dict = field(default_factory=dict)

    @property
    def num_distributions(self) -> int:
        return self.plan.spec.num_distributions


def assign_distributions(K: int, M: int, seed: int) -> np.ndarray:
    """Round-robin ids, then shuffled, so each of the M ids appears."""
    if K < M:
        raise ConfigurationError(f"K: {K} clients cannot cover {M} distributions")
    ids = np.arange(K) % M
    return ids[RngStream.derived(seed, "assign").permutation(K)]


@dataclass(frozen=True)
class SyntheticTask:
    """Gaussian class blobs; class centres sit at a fixed radius in the rotation plane."""

    centers: np.ndarray
    noise: float
    color_offsets: dict

    @classmethod
    def create(cls, U: int, z: int, seed: int, class_sep: float = 4.0, plane_radius: float = 3.0,
               noise: float = 1.0, color_shift: float = 6.0) -> SyntheticTask:
        if z < 3:
            raise ConfigurationError("z: synthetic data needs at least 3 dimensions")
        rng = RngStream.derived(seed, "centers")
        centers = np.zeros((U, z))
        angles = 2.0 * np.pi * rng.uniforms(U)
        centers[:, 0] = plane_radius * np.cos(angles)
        centers[:, 1] = plane_radius * np.sin(angles)
        centers[:, 2:] = rng.normals(U * (z - 2)).reshape(U, z - 2) * class_sep / math.sqrt(2.0 * (z - 2))
        offsets = {"original": np.zeros(z)}
        bounds = np.linspace(0, z, 4).astype(int)
        for c, name in enumerate(("red", "green", "blue")):
            vec = np.zeros(z)
            lo, hi = bounds[c], bounds[c + 1]
            vec[lo:hi] = color_shift / math.sqrt(hi - lo)
            offsets[name] = vec
        return cls(centers, float(noise), offsets)


def rotate_plane(features: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate rows counter-clockwise in the (x0, x1) plane."""
    out = np.array(features, dtype=np.float64, copy=True)
    if degrees % 360 == 0:
        return out
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    x0, x1 = features[:, 0], features[:, 1]
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1
    return out


def apply_rotation_to_images(features, degrees: int, side: int = 28) -> np.ndarray:
    """Rotate flattened square images clockwise by a right angle (pure index permutation)."""
    if degrees not in _RIGHT_ANGLES:
        raise ConfigurationError(f"unsupported rotation {degrees} (right angles only)")
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[1] != side * side:
        raise ConfigurationError(f"expected rows of {side * side} pixels, got shape {x.shape}")
    if degrees == 0:
        return x.copy()
    imgs = x.reshape(-1, side, side)
    return np.ascontiguousarray(np.rot90(imgs, k=-(degrees // 90), axes=(1, 2))).reshape(x.shape[0], -1)


def apply_transform(plan: ShiftPlan, dist: int, features: np.ndarray, labels: np.ndarray,
                    rotate, offsets: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    t = plan.transforms[dist]
    x, y = features, labels
    if t.rotation:
        x = rotate(x, t.rotation)
    if t.color != "original":
        x = x + offsets[t.color]
    if t.class_rotations:
        x = np.array(x, copy=True)
        for cls_id, deg in sorted(t.class_rotations.items()):
            rows = np.flatnonzero(labels == cls_id)
            if rows.size and deg:
                x[rows] = rotate(x[rows], deg)
    if t.label_map is not None:
        y = np.asarray(t.label_map, dtype=np.int64)[labels]
    return x, y


def _balanced_labels(allowed: np.ndarray, s: int, rng: RngStream) -> np.ndarray:
    labels = allowed[np.arange(s) % allowed.size]
    return labels[rng.permutation(s)]


def _synthetic_client(task: SyntheticTask, plan: ShiftPlan, dist: int, s: int, rng: RngStream):
    # Train and validation splits are balanced separately.
    allowed = plan.allowed_classes(dist)
    n_train = split_point(s)
    labels = np.concatenate([_balanced_labels(allowed, n_train, rng), _balanced_labels(allowed, s - n_train, rng)])
    z = task.centers.shape[1]
    x = task.centers[labels] + task.noise * rng.normals(s * z).reshape(s, z)
    return apply_transform(plan, dist, x, labels, rotate_plane, task.color_offsets)


def generate_federation(K: int, U: int, z: int, per_client_samples: int, spec: ShiftSpec, seed: int,
                        test_per_distribution: int = 0, class_sep: float = 4.0, plane_radius: float = 3.0,
                        noise: float = 1.0, color_shift: float = 6.0) -> Federation:
    """Synthetic federation plus optional held-out test clients drawn from the same distributions."""
    if U < 2:
        raise ConfigurationError("U: need at least 2 classes")
    if per_client_samples < 2 * U:
        raise ConfigurationError(f"per_client_samples: need at least 2*U = {2 * U}")
    M = spec.num_distributions
    ids = assign_distributions(K, M, seed)
    plan = build_shift_plan(spec, U, seed)
    task = SyntheticTask.create(U, z, seed, class_sep, plane_radius, noise, color_shift)
    n_train = split_point(per_client_samples)

    clients = []
    for k in range(K):
        x, y = _synthetic_client(task, plan, int(ids[k]), per_client_samples,
                                 RngStream.derived(seed, "client-data", k))
        clients.append(ClientDataset(k, x, y, n_train, int(ids[k])))
    tests = []
    for q in range(test_per_distribution * M):
        dist = q // test_per_distribution
        x, y = _synthetic_client(task, plan, dist, per_client_samples, RngStream.derived(seed, "test-data", q))
        tests.append(ClientDataset(q, x, y, n_train, dist))
    generator = {"kind": "synthetic", "class_sep": class_sep, "plane_radius": plane_radius,
                 "noise": noise, "color_shift": color_shift, "per_client_samples": per_client_samples,
                 "test_per_distribution": test_per_distribution}
    return Federation(clients, tests, plan, U, z, seed, generator)


def gen_synthetic_federation(K: int, U: int, z: int, per_client_samples: int, spec: ShiftSpec,
                             seed: int, **kwargs) -> list[ClientDataset]:
    return generate_federation(K, U, z, per_client_samples, spec, seed, **kwargs).clients


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_idx(path, expected_magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxParseError("file too short for IDX magic", len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxParseError(f"bad magic 0x{magic:08X}, expected 0x{expected_magic:08X}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxParseError("truncated IDX header", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = header_end + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise IdxParseError(f"truncated IDX payload: need {need} bytes, have {len(raw)}", len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=need - header_end, offset=header_end)
    return data, dims


def load_mnist_idx(images_path, labels_path, limit: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read MNIST-format IDX files into ``(n x rows*cols)`` features in [0, 1] and int labels."""
    pixels, img_dims = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, lab_dims = _read_idx(labels_path, IDX_LABELS_MAGIC)
    n, rows, cols = img_dims
    if lab_dims[0] != n:
        raise IdxParseError(f"label count {lab_dims[0]} does not match image count {n}", 4)
    if limit is not None:
        n = min(n, int(limit))
    features = pixels[: n * rows * cols].reshape(n, rows * cols).astype(np.float64) / 255.0
    return features, labels[:n].astype(np.int64)


def generate_mnist_federation(features, labels, K: int, per_client_samples: int, spec: ShiftSpec,
                              seed: int, test_per_distribution: int = 0, num_classes: int = 10) -> Federation:
    """Partition loaded images into shifted clients (rotations only, no colour)."""
    x_all = np.asarray(features, dtype=np.float64)
    y_all = np.asarray(labels, dtype=np.int64)
    side = int(round(math.sqrt(x_all.shape[1])))
    if side * side != x_all.shape[1]:
        raise ConfigurationError("features must be flattened square images")
    M = spec.num_distributions
    ids = assign_distributions(K, M, seed)
    plan = build_shift_plan(spec, num_classes, seed, right_angles_only=True)
    available = RngStream.derived(seed, "mnist-order").permutation(y_all.size)
    used = np.zeros(y_all.size, dtype=bool)
    n_train = split_point(per_client_samples)

    def rotate(x, deg):
        return apply_rotation_to_images(x, int(deg), side)

    def draw(dist: int, rng: RngStream):
        allowed = plan.allowed_classes(dist)
        pool = available[np.isin(y_all[available], allowed) & ~used[available]]
        if pool.size < per_client_samples:
            raise ConfigurationError("per_client_samples: not enough images for the requested federation")
        idx = pool[:per_client_samples]
        used[idx] = True
        idx = idx[rng.permutation(idx.size)]
        return apply_transform(plan, dist, x_all[idx], y_all[idx], rotate)

    clients = []
    for k in range(K):
        x, y = draw(int(ids[k]), RngStream.derived(seed, "client-data", k))
        clients.append(ClientDataset(k, x, y, n_train, int(ids[k])))
    tests = []
    for q in range(test_per_distribution * M):
        dist = q // test_per_distribution
        x, y = draw(dist, RngStream.derived(seed, "test-data", q))
        tests.append(ClientDataset(q, x, y, n_train, dist))
    generator = {"kind": "mnist", "per_client_samples": per_client_samples,
                 "test_per_distribution": test_per_distribution}
    return Federation(clients, tests, plan, num_classes, x_all.shape[1], seed, generator)


def write_client_file(path, client: ClientDataset, K: int, U: int) -> None:
    s, z = client.features.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(K, U, z, s))
        fh.write(client.labels.astype("<i8").tobytes())
        fh.write(client.features.astype("<f8").tobytes())


def read_client_file(path) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Return ``(K, U, features, labels)`` from one FLUXDS1 file."""
    raw = Path(path).read_bytes()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ConfigurationError(f"{path}: not a FLUXDS1 file")
    off = len(DATASET_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise ConfigurationError(f"{path}: truncated header")
    K, U, z, s = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    if len(raw) != off + 8 * s + 8 * s * z:
        raise ConfigurationError(f"{path}: payload size does not match header")
    labels = np.frombuffer(raw, dtype="<i8", count=s, offset=off).astype(np.int64)
    features = np.frombuffer(raw, dtype="<f8", count=s * z, offset=off + 8 * s).reshape(s, z).astype(np.float64)
    return K, U, features, labels


def save_federation(fed: Federation, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = len(fed.clients)
    entries = []
    for group, prefix, items in (("clients", "client", fed.clients), ("test_clients", "test", fed.test_clients)):
        rows = []
        for c in items:
            name = f"{prefix}_{c.client_id:04d}.bin"
            write_client_file(out / name, c, K, fed.num_classes)
            rows.append({"file": name, "client_id": c.client_id, "distribution_id": c.distribution_id,
                         "n_train": c.n_train, "n_samples": c.num_samples})
        entries.append((group, rows))
    manifest = {
        "format": DATASET_MAGIC.decode(),
        "seed": fed.seed,
        "K": K,
        "U": fed.num_classes,
        "z": fed.dim,
        "shift": fed.plan.spec.to_dict(),
        "plan": fed.plan.to_dict(),
        "generator": fed.generator,
        "ground_truth": [c.distribution_id for c in fed.clients],
    }
    manifest.update(dict(entries))
    if extra:
        manifest["extra"] = extra
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_federation(data_dir) -> Federation:
    d = Path(data_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"data: no manifest.json in {d}")
    manifest = json.loads(manifest_path.read_text())
    spec = ShiftSpec(**manifest["shift"])
    plan = build_shift_plan(spec, manifest["U"], manifest["seed"],
                            right_angles_only=manifest.get("generator", {}).get("kind") == "mnist")

    def load(rows):
        out = []
        for row in rows:
            _, _, x, y = read_client_file(d / row["file"])
            out.append(ClientDataset(row["client_id"], x, y, row["n_train"], row["distribution_id"]))
        return out

    return Federation(load(manifest["clients"]), load(manifest.get("test_clients", [])), plan,
                      manifest["U"], manifest["z"], manifest["seed"], manifest.get("generator", {}))
