import numpy as np
import pytest

from fluxfl.clustering import ClusterState
from fluxfl.datagen import ClientDataset
from fluxfl.federation import (
    ExperimentConfig,
    FederationState,
    Mode,
    descriptor_ratio,
    evaluate_known_association,
    infer_test_clients,
    init_state,
    majority_clusters,
    run_experiment,
    run_round,
    run_training,
    sample_participants,
    should_trigger,
)
from fluxfl.harness.config import federation_for
from fluxfl.numcore import ConfigurationError, MlpModel

SMALL = dict(shift_type="feature", level=5, num_distributions=3, K=9, U=4, z=16, per_client_samples=100,
             hidden=12, pca_dim=4, rounds=6, lr=0.05, noise=0.1, color_shift=20.0, test_per_distribution=2)


def small(**overrides):
    return ExperimentConfig.from_dict({**SMALL, **overrides})


def test_trigger_examples():
    a = [0.1, 0.5, 0.7, 0.75]
    assert not should_trigger(a[:3], 3, 10, 0.06)
    assert should_trigger(a, 4, 10, 0.06)
    assert should_trigger([0.5] * 8, 8, 10, 0.06)
    assert should_trigger([0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5], 8, 10, 0.06)
    assert not should_trigger([0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3], 7, 10, 0.06)
    for r in (1, 2):
        assert not should_trigger([0.0] * r, r, 10, 0.06)


def test_config_validation_names_field():
    with pytest.raises(ConfigurationError, match="shift_type"):
        ExperimentConfig.from_dict({"K": 12})
    with pytest.raises(ConfigurationError, match="participation_rate"):
        small(participation_rate=0.0)
    with pytest.raises(ConfigurationError, match="rounds"):
        small(rounds=3)
    with pytest.raises(ConfigurationError, match="bogus"):
        ExperimentConfig.from_dict({**SMALL, "bogus": 1})
    with pytest.raises(ConfigurationError, match="K"):
        small(K="twelve")
    with pytest.raises(ConfigurationError, match="mode"):
        small(mode="fedprox")


def test_config_roundtrip():
    cfg = small(mode="flux-prior", dp_epsilon=3)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.mode is Mode.FLUX_PRIOR and cfg.dp_epsilon == 3.0


def test_participation_sampling():
    cfg = small()
    assert sample_participants(cfg, 1) == list(range(9))
    cfg = small(participation_rate=0.3)
    draws = [sample_participants(cfg, r) for r in range(1, 40)]
    assert all(len(d) >= 1 for d in draws)
    assert len({tuple(d) for d in draws}) > 1
    assert draws[0] == sample_participants(cfg, 1)


def test_fedavg_never_triggers_and_keeps_one_model():
    cfg = small(mode="fedavg")
    state, logs = run_training(cfg, federation_for(cfg))
    assert not state.triggered and len(state.models) == 1
    assert all(entry.M == 1 for entry in logs)
    assert len(state.history) == cfg.rounds


def test_fedavg_equals_flux_with_trigger_disabled():
    fa = small(mode="fedavg")
    fl = small(mode="flux", trigger=False)
    fed = federation_for(fa)
    a, _ = run_training(fa, fed)
    b, _ = run_training(fl, fed)
    np.testing.assert_array_equal(a.global_model.params, b.global_model.params)
    assert a.history == b.history


def test_flux_recovers_feature_shift_partition():
    cfg = small()
    fed = federation_for(cfg)
    result = run_experiment(cfg, fed)
    state = result.state
    assert state.triggered and result.M_found == 3
    truth = [c.distribution_id for c in fed.clients]
    found = [state.client_cluster[c.client_id] for c in fed.clients]
    assert len(set(zip(truth, found))) == 3
    assert len(state.cluster_models) == 3
    assert {m.size for m in state.cluster_models} == {state.global_model.size}
    majority = majority_clusters(state, fed.clients)
    assert result.test_assignments == [majority[c.distribution_id] for c in fed.test_clients]


def test_round_log_contents():
    cfg = small()
    state, logs = run_training(cfg, federation_for(cfg))
    trig = [entry for entry in logs if entry.triggered]
    assert len(trig) == 1 and trig[0].round == state.trigger_round
    assert len(trig[0].descriptors) == cfg.K
    assert all(len(v) == cfg.layout.length for v in trig[0].descriptors.values())
    assert trig[0].descriptor_ratio == pytest.approx(cfg.layout.length / state.global_model.size)
    payload = trig[0].to_json()
    assert {"round", "participants", "cluster_sizes", "accuracy", "triggered", "epsilon", "M"} <= set(payload)
    assert [entry.round for entry in logs] == list(range(1, cfg.rounds + 1))


def test_trigger_freezes_reference_model():
    cfg = small()
    fed = federation_for(cfg)
    state = init_state(cfg)
    while not state.triggered:
        state, _ = run_round(state, cfg, fed.clients)
    ref = state.reference_model.params.copy()
    np.testing.assert_array_equal(ref, state.global_model.params)
    for m in state.cluster_models:
        np.testing.assert_array_equal(m.params, ref)
    state, _ = run_round(state, cfg, fed.clients)
    np.testing.assert_array_equal(state.reference_model.params, ref)
    assert any(not np.array_equal(m.params, ref) for m in state.cluster_models)


def test_partial_participation_late_joiners_and_idle_clusters():
    cfg = small(participation_rate=0.4, rounds=12)
    fed = federation_for(cfg)
    state = init_state(cfg)
    seen_late = False
    while state.round < cfg.rounds:
        before = [m.params.copy() for m in state.cluster_models]
        was_triggered = state.triggered
        state, entry = run_round(state, cfg, fed.clients)
        if was_triggered:
            active = {state.client_cluster[k] for k in entry.participants}
            for m, params in enumerate(before):
                if m not in active:
                    np.testing.assert_array_equal(state.cluster_models[m].params, params)
            seen_late |= bool(entry.late_joiners)
            for k, m in entry.late_joiners.items():
                assert k in entry.participants and 0 <= m < state.cluster_state.M
    assert state.triggered and seen_late


def test_inference_before_training_is_an_error():
    cfg = small()
    fed = federation_for(cfg)
    with pytest.raises(ConfigurationError, match="inference before training"):
        infer_test_clients(init_state(cfg), cfg, fed.test_clients)


def test_fedavg_inference_uses_single_model():
    cfg = small(mode="fedavg")
    result = run_experiment(cfg, federation_for(cfg))
    assert result.M_found == 1
    assert result.test_assignments == [0] * 6
    assert result.known_assoc_acc == result.test_phase_acc


def test_concept_y_given_x_reports_no_test_phase_metric():
    cfg = small(shift_type="concept_y_given_x", level=3)
    result = run_experiment(cfg, federation_for(cfg))
    assert result.test_phase_acc is None and result.known_assoc_acc is not None


def test_flux_prior_uses_true_cluster_count():
    cfg = small(mode="flux-prior")
    result = run_experiment(cfg, federation_for(cfg))
    assert result.M_found == 3


def _state_with(assign, M):
    model = MlpModel.zeros(2, 2, 2)
    cs = ClusterState(M, np.array(list(assign.values())), np.zeros((M, 2)), np.zeros((M, 2)))
    return FederationState(Mode.FLUX, model, reference_model=model, cluster_state=cs,
                           cluster_models=[model] * M, client_cluster=dict(assign), triggered=True)


def _client(k, dist):
    return ClientDataset(k, np.zeros((4, 2)), np.zeros(4, dtype=np.int64), 3, dist)


def test_majority_rule_and_ties():
    clients = [_client(k, d) for k, d in enumerate([0, 0, 0, 1, 1])]
    state = _state_with({0: 1, 1: 1, 2: 0, 3: 2, 4: 0}, 3)
    assert majority_clusters(state, clients) == {0: 1, 1: 0}


def test_known_association_falls_back_to_reference():
    clients = [_client(0, 0), _client(1, 0)]
    state = _state_with({0: 0, 1: 0}, 1)
    out = evaluate_known_association(state, clients, [_client(0, 1)])
    assert out[0].cluster == -1


def test_iid_reduction_is_bit_identical():
    cfg_fa = small(shift_type="none", num_distributions=1, mode="fedavg")
    cfg_fl = small(shift_type="none", num_distributions=1, mode="flux")
    fed = federation_for(cfg_fa)
    a, _ = run_training(cfg_fa, fed)
    b, _ = run_training(cfg_fl, fed)
    assert b.triggered and b.cluster_state.M == 1
    np.testing.assert_array_equal(a.global_model.params, b.cluster_models[0].params)


def test_thread_count_does_not_change_results():
    cfg = small(participation_rate=0.7)
    fed = federation_for(cfg)
    a = run_experiment(cfg, fed, threads=1)
    b = run_experiment(cfg, fed, threads=4)
    assert [x.to_json() for x in a.logs] == [x.to_json() for x in b.logs]
    for ma, mb in zip(a.state.models, b.state.models):
        np.testing.assert_array_equal(ma.params, mb.params)


def test_dp_descriptors_differ_but_stay_deterministic():
    cfg = small(dp_epsilon=1.0)
    fed = federation_for(cfg)
    a = run_experiment(cfg, fed)
    b = run_experiment(cfg, fed)
    clean = run_experiment(small(), fed)
    ta = next(e for e in a.logs if e.triggered).descriptors
    assert ta == next(e for e in b.logs if e.triggered).descriptors
    assert ta != next(e for e in clean.logs if e.triggered).descriptors


def test_default_descriptor_ratio():
    cfg = ExperimentConfig.from_dict({"shift_type": "feature"})
    assert cfg.layout.length == 220
    assert descriptor_ratio(cfg) == 220 / 50890


def test_incompatible_federation_rejected():
    cfg = small()
    fed = federation_for(small(U=5))
    with pytest.raises(ConfigurationError, match="data"):
        run_experiment(cfg, fed)
