"""Round loop for FedAvg and clustered training, plus test-time evaluation.

Training starts as plain FedAvg on one global model. Once the accuracy
curve flattens (or 80% of the rounds have passed) the global model is
frozen as the reference encoder, the round's participants send descriptors,
and the server clusters them. From then on each cluster trains its own copy
of the model; clients seen for the first time are attached to the nearest
cluster by their full descriptor. Test clients only have features and are
matched on the label-free descriptor prefix.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterState, assign_nearest_centroid, dbscan_adaptive, kmeans_prior
from .datagen import ClientDataset, Federation, ShiftSpec, ShiftType
from .descriptor import (
    AlignmentBounds,
    DescriptorLayout,
    DescriptorVector,
    DpConfig,
    PcaMap,
    extract_descriptor,
    fit_shared_pca,
    local_bounds,
    merge_bounds,
)
from .numcore import (
    ConfigurationError,
    MlpModel,
    RngStream,
    accuracy,
    derive_seed,
    latents_of,
    mlp_train_local,
    predict,
    weighted_param_mean,
)

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FEDAVG = "fedavg"
    FLUX = "flux"
    FLUX_PRIOR = "flux-prior"

    @classmethod
    def parse(cls, value) -> Mode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("_", "-"))
        except ValueError:
            raise ConfigurationError(f"mode: unknown value {value!r} (expected fedavg, flux or flux-prior)") from None


@dataclass(frozen=True)
class ExperimentConfig:
    shift_type: ShiftType
    level: int = 1
    num_distributions: int = 1
    K: int = 12
    U: int = 10
    z: int = 784
    per_client_samples: int = 300
    hidden: int = 64
    rounds: int = 10
    local_epochs: int = 2
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 64
    participation_rate: float = 1.0
    trigger: bool = True
    trigger_threshold: float = 0.06
    trigger_floor: int = 3
    trigger_ceiling: float = 0.8
    mode: Mode = Mode.FLUX
    dbscan_scale: float = 1.0
    elbow_method: str = "gap"
    pca_dim: int = 10
    pca_points: int = 200
    use_sigma: bool = True
    use_class_blocks: bool = True
    dp_epsilon: float | None = None
    seed: int = 42
    test_per_distribution: int = 2
    class_sep: float = 4.0
    plane_radius: float = 3.0
    noise: float = 1.0
    color_shift: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "shift_type", ShiftType.parse(self.shift_type))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not 0 < self.participation_rate <= 1:
            raise ConfigurationError("participation_rate: must be in (0, 1]")
        if self.rounds < 4:
            raise ConfigurationError("rounds: must be >= 4")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs: must be >= 1")
        if self.hidden < self.pca_dim:
            raise ConfigurationError("pca_dim: cannot exceed the latent width (hidden)")
        if self.K < self.num_distributions:
            raise ConfigurationError("K: fewer clients than distributions")
        if self.dp_epsilon is not None and not self.dp_epsilon > 0:
            raise ConfigurationError("dp_epsilon: must be positive")
        if self.elbow_method not in ("gap", "kneedle"):
            raise ConfigurationError("elbow_method: expected 'gap' or 'kneedle'")

    @property
    def shift(self) -> ShiftSpec:
        return ShiftSpec(self.shift_type, self.level, self.num_distributions)

    @property
    def layout(self) -> DescriptorLayout:
        return DescriptorLayout(self.pca_dim, self.U, self.use_sigma, self.use_class_blocks)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigurationError(f"{unknown[0]}: unknown configuration key")
        if "shift_type" not in data or data["shift_type"] in (None, ""):
            raise ConfigurationError("shift_type: required configuration key is missing")
        kwargs = {}
        for name, value in data.items():
            kwargs[name] = _coerce(name, known[name].type, value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["shift_type"] = self.shift_type.value
        out["mode"] = self.mode.value
        return out


def _coerce(name: str, annotation: str, value):
    try:
        if annotation == "bool":
            if isinstance(value, bool):
                return value
            raise TypeError
        if annotation == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if annotation == "float":
            return float(value)
        if annotation == "float | None":
            return None if value is None else float(value)
        if annotation == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name}: invalid value {value!r} (expected {annotation})") from None
    return value


@dataclass
class FederationState:
    mode: Mode
    global_model: MlpModel
    round: int = 0
    reference_model: MlpModel | None = None
    cluster_state: ClusterState | None = None
    cluster_models: list[MlpModel] = field(default_factory=list)
    client_cluster: dict[int, int] = field(default_factory=dict)
    client_params: dict[int, np.ndarray] = field(default_factory=dict)
    client_samples: dict[int, int] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    triggered: bool = False
    trigger_round: int | None = None
    bounds: AlignmentBounds | None = None
    pca: PcaMap | None = None

    @property
    def models(self) -> list[MlpModel]:
        return self.cluster_models if self.triggered else [self.global_model]

    def model_for(self, cluster: int) -> MlpModel:
        return self.cluster_models[cluster] if self.triggered else self.global_model


@dataclass
class RoundLog:
    round: int
    participants: list[int]
    cluster_sizes: list[int]
    accuracy: float
    triggered: bool
    epsilon: float | None
    M: int
    late_joiners: dict[int, int] = field(default_factory=dict)
    descriptors: dict[int, list[float]] | None = None
    descriptor_ratio: float | None = None

    def to_json(self) -> dict:
        out = {
            "round": self.round,
            "participants": self.participants,
            "cluster_sizes": self.cluster_sizes,
            "accuracy": self.accuracy,
            "triggered": self.triggered,
            "epsilon": self.epsilon,
            "M": self.M,
            "late_joiners": {str(k): v for k, v in sorted(self.late_joiners.items())},
        }
        if self.descriptors is not None:
            out["descriptors"] = {str(k): v for k, v in sorted(self.descriptors.items())}
        if self.descriptor_ratio is not None:
            out["descriptor_ratio"] = self.descriptor_ratio
        return out


def should_trigger(history, r: int, R: int, T: float = 0.06, floor: int = 3,
                   ceiling: float = 0.8) -> bool:
    """Fire once ``r >= floor`` and either some round-to-round accuracy gain since
    round ``floor`` fell below ``T`` or ``r`` reached ``ceiling * R``."""
    if r < floor:
        return False
    if r >= ceiling * R:
        return True
    a = list(history)[:r]
    diffs = [a[i - 1] - a[i - 2] for i in range(max(floor, 2), r + 1)]
    return bool(diffs) and min(diffs) < T


def init_state(config: ExperimentConfig) -> FederationState:
    model = MlpModel.init(config.z, config.hidden, config.U, RngStream.derived(config.seed, "init"))
    return FederationState(mode=config.mode, global_model=model)


def sample_participants(config: ExperimentConfig, r: int) -> list[int]:
    u = RngStream.derived(config.seed, "participation", r).uniforms(config.K)
    chosen = np.flatnonzero(u < config.participation_rate)
    if chosen.size == 0:
        chosen = np.array([int(np.argmin(u))])
    return [int(k) for k in chosen]


def _map(pool, fn, items):
    if pool is None:
        return [fn(i) for i in items]
    return list(pool.map(fn, items))


def _train(config: ExperimentConfig, model: MlpModel, client: ClientDataset, r: int) -> MlpModel:
    rng = RngStream.derived(config.seed, "train", client.client_id, r)
    return mlp_train_local(model, client.train_x, client.train_y, config.local_epochs, config.lr,
                           config.momentum, rng, config.batch_size)


def client_descriptor(config: ExperimentConfig, state: FederationState, x, y, stream: tuple) -> DescriptorVector:
    latents = latents_of(state.reference_model, x)
    dp = None
    rng = None
    if config.dp_epsilon is not None:
        dp = DpConfig(config.dp_epsilon, state.bounds)
        rng = RngStream.derived(config.seed, *stream)
    return extract_descriptor(latents, y, config.U, state.pca, dp, rng, config.use_sigma, config.use_class_blocks)


def _cluster(config: ExperimentConfig, state: FederationState, clients: dict[int, ClientDataset],
             participants: list[int], r: int, pool) -> tuple[dict[int, DescriptorVector], float]:
    """Freeze the reference model, align, extract descriptors and cluster."""
    state.reference_model = state.global_model
    latents = _map(pool, lambda k: latents_of(state.reference_model, clients[k].train_x), participants)
    state.bounds = merge_bounds([local_bounds(h) for h in latents])
    state.pca = fit_shared_pca(state.bounds, config.pca_points, config.pca_dim, derive_seed(config.seed, "pca"))
    descs = _map(pool, lambda k: client_descriptor(config, state, clients[k].train_x, clients[k].train_y,
                                                   ("dp", k, r)), participants)
    if config.mode is Mode.FLUX_PRIOR:
        cs = kmeans_prior(descs, min(config.num_distributions, len(descs)), derive_seed(config.seed, "kmeans"))
    else:
        cs = dbscan_adaptive(descs, config.dbscan_scale, config.elbow_method)
    state.cluster_state = cs
    state.cluster_models = [state.global_model for _ in range(cs.M)]
    state.client_cluster = {k: int(cs.assignment[i]) for i, k in enumerate(participants)}
    state.triggered = True
    state.trigger_round = r
    ratio = descs[0].values.size / state.global_model.size
    log.info("round %d: clustered %d clients into %d clusters (eps=%s, L/p=%.2e)",
             r, len(participants), cs.M, cs.epsilon, ratio)
    return dict(zip(participants, descs)), ratio


def run_round(state: FederationState, config: ExperimentConfig, clients, pool=None) -> tuple[FederationState, RoundLog]:
    """One communication round; returns the new state and its log entry."""
    by_id = {c.client_id: c for c in clients} if not isinstance(clients, dict) else clients
    state = dataclasses.replace(state, client_cluster=dict(state.client_cluster),
                                client_params=dict(state.client_params),
                                client_samples=dict(state.client_samples),
                                history=list(state.history), cluster_models=list(state.cluster_models))
    r = state.round + 1
    participants = sample_participants(config, r)
    late: dict[int, int] = {}

    if state.triggered:
        unknown = [k for k in participants if k not in state.client_cluster]
        descs = _map(pool, lambda k: client_descriptor(config, state, by_id[k].train_x, by_id[k].train_y,
                                                       ("dp", k, r)), unknown)
        for k, d in zip(unknown, descs):
            late[k] = assign_nearest_centroid(d.values, state.cluster_state.full_centroids)
            state.client_cluster[k] = late[k]
        start = {k: state.cluster_models[state.client_cluster[k]] for k in participants}
    else:
        start = {k: state.global_model for k in participants}

    trained = _map(pool, lambda k: _train(config, start[k], by_id[k], r), participants)
    for k, model in zip(participants, trained):
        state.client_params[k] = model.params
        state.client_samples[k] = by_id[k].n_train

    if state.triggered:
        for m in range(state.cluster_state.M):
            ks = [k for k in participants if state.client_cluster[k] == m]
            if ks:
                params = weighted_param_mean([state.client_params[k] for k in ks],
                                             [state.client_samples[k] for k in ks])
                state.cluster_models[m] = state.cluster_models[m].with_params(params)
    else:
        params = weighted_param_mean([state.client_params[k] for k in participants],
                                     [state.client_samples[k] for k in participants])
        state.global_model = state.global_model.with_params(params)

    correct = 0.0
    total = 0
    for k in participants:
        c = by_id[k]
        if c.val_y.size == 0:
            continue
        model = state.cluster_models[state.client_cluster[k]] if state.triggered else state.global_model
        correct += accuracy(model, c.val_x, c.val_y) * c.val_y.size
        total += c.val_y.size
    acc = correct / total if total else 0.0
    state.history.append(acc)
    state.round = r

    fired = False
    descriptors = None
    ratio = None
    if (state.mode is not Mode.FEDAVG and config.trigger and not state.triggered
            and should_trigger(state.history, r, config.rounds, config.trigger_threshold,
                               config.trigger_floor, config.trigger_ceiling)):
        descs, ratio = _cluster(config, state, by_id, participants, r, pool)
        descriptors = {k: d.to_list() for k, d in descs.items()}
        fired = True

    cs = state.cluster_state
    entry = RoundLog(
        round=r,
        participants=participants,
        cluster_sizes=cs.sizes() if cs is not None else [len(participants)],
        accuracy=acc,
        triggered=fired,
        epsilon=cs.epsilon if cs is not None else None,
        M=cs.M if cs is not None else 1,
        late_joiners=late,
        descriptors=descriptors,
        descriptor_ratio=ratio,
    )
    if cs is not None:
        entry.cluster_sizes = [sum(1 for v in state.client_cluster.values() if v == m) for m in range(cs.M)]
    return state, entry


@dataclass
class TestOutcome:
    client_id: int
    cluster: int
    accuracy: float
    num_samples: int


def infer_test_clients(state: FederationState, config: ExperimentConfig,
                       test_clients: list[ClientDataset]) -> list[TestOutcome]:
    """Assign each unlabeled test client by its label-free descriptor and score it."""
    if not state.triggered:
        if state.mode is not Mode.FEDAVG:
            raise ConfigurationError("inference before training")
        return [TestOutcome(c.client_id, 0, accuracy(state.global_model, c.features, c.labels), c.num_samples)
                for c in test_clients]
    out = []
    for c in test_clients:
        d = client_descriptor(config, state, c.features, None, ("dp-test", c.client_id))
        m = assign_nearest_centroid(d.label_free, state.cluster_state.centroids)
        out.append(TestOutcome(c.client_id, m, accuracy(state.cluster_models[m], c.features, c.labels),
                               c.num_samples))
    return out


def majority_clusters(state: FederationState, clients: list[ClientDataset]) -> dict[int, int]:
    """Distribution id -> cluster holding most of its training clients (ties: lowest id)."""
    votes: dict[int, dict[int, int]] = {}
    for c in clients:
        if c.client_id in state.client_cluster:
            counts = votes.setdefault(c.distribution_id, {})
            m = state.client_cluster[c.client_id]
            counts[m] = counts.get(m, 0) + 1
    return {dist: min(counts, key=lambda m: (-counts[m], m)) for dist, counts in votes.items()}


def evaluate_known_association(state: FederationState, train_clients: list[ClientDataset],
                               test_clients: list[ClientDataset]) -> list[TestOutcome]:
    """Score each test client with the model of its true distribution's majority cluster.

    A distribution with no clustered training client falls back to the
    reference (pre-clustering) model.
    """
    if not state.triggered:
        return [TestOutcome(c.client_id, 0, accuracy(state.global_model, c.features, c.labels), c.num_samples)
                for c in test_clients]
    majority = majority_clusters(state, train_clients)
    out = []
    for c in test_clients:
        m = majority.get(c.distribution_id)
        model = state.cluster_models[m] if m is not None else state.reference_model
        out.append(TestOutcome(c.client_id, -1 if m is None else m, accuracy(model, c.features, c.labels),
                               c.num_samples))
    return out


def weighted_accuracy(outcomes: list[TestOutcome]) -> float | None:
    n = sum(o.num_samples for o in outcomes)
    if n == 0:
        return None
    return sum(o.accuracy * o.num_samples for o in outcomes) / n


@dataclass
class ExperimentResult:
    state: FederationState
    logs: list[RoundLog]
    known_assoc_acc: float | None
    test_phase_acc: float | None
    M_found: int
    M_true: int
    descriptor_ratio: float
    wall_time_ms: float
    test_assignments: list[int] = field(default_factory=list)


def run_training(config: ExperimentConfig, federation: Federation, threads: int = 1,
                 on_round=None) -> tuple[FederationState, list[RoundLog]]:
    state = init_state(config)
    logs = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _ in range(config.rounds):
            state, entry = run_round(state, config, federation.clients, pool)
            logs.append(entry)
            if on_round is not None:
                on_round(entry)
    finally:
        if pool is not None:
            pool.shutdown()
    return state, logs


def check_compatible(config: ExperimentConfig, federation: Federation) -> None:
    if federation.dim != config.z or federation.num_classes != config.U or len(federation.clients) != config.K:
        raise ConfigurationError(
            f"data: federation has K={len(federation.clients)}, U={federation.num_classes}, z={federation.dim}; "
            f"config expects K={config.K}, U={config.U}, z={config.z}"
        )


def evaluate(config: ExperimentConfig, state: FederationState, federation: Federation):
    """Known-association and test-phase accuracies (the latter is None under P(Y|X) shift)."""
    tests = federation.test_clients
    known = weighted_accuracy(evaluate_known_association(state, federation.clients, tests)) if tests else None
    test_phase = None
    assignments: list[int] = []
    if tests:
        outcomes = infer_test_clients(state, config, tests)
        assignments = [o.cluster for o in outcomes]
        if config.shift_type is not ShiftType.CONCEPT_Y_GIVEN_X:
            test_phase = weighted_accuracy(outcomes)
    return known, test_phase, assignments


def run_experiment(config: ExperimentConfig, federation: Federation, threads: int = 1,
                   on_round=None) -> ExperimentResult:
    check_compatible(config, federation)
    t0 = time.perf_counter()
    state, logs = run_training(config, federation, threads, on_round)
    known, test_phase, assignments = evaluate(config, state, federation)
    wall = (time.perf_counter() - t0) * 1000.0
    M_found = state.cluster_state.M if state.triggered else 1
    ratio = config.layout.length / state.global_model.size
    return ExperimentResult(state, logs, known, test_phase, M_found, federation.num_distributions,
                            ratio, wall, assignments)


def predictions_for(state: FederationState, cluster: int, x) -> np.ndarray:
    return predict(state.model_for(cluster), x)


def descriptor_ratio(config: ExperimentConfig) -> float:
    p = config.z * config.hidden + config.hidden + config.hidden * config.U + config.U
    return config.layout.length / p


def is_finite_accuracy(v) -> bool:
    return v is not None and math.isfinite(v)
