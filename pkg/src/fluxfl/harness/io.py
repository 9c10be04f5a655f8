"""Round logs, metrics CSV and trained-state files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..clustering import ClusterState
from ..descriptor import AlignmentBounds, PcaMap
from ..federation import FederationState, Mode, RoundLog
from ..numcore import ConfigurationError, MlpModel

METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = ("run_id", "mode", "shift_type", "level", "seed", "known_assoc_acc", "test_phase_acc",
                   "M_found", "M_true", "wall_time_ms")
NA = "NA"


def format_value(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_round_log(path, logs: list[RoundLog]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for entry in logs:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
    return path


def append_round_log(path, entry: RoundLog) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row.get(c)) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_state(state: FederationState, out_dir) -> Path:
    """Write ``state.json`` (scalars, assignments) and ``state.npz`` (parameters, centroids)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = state.global_model
    arrays = {"global": g.params}
    meta = {
        "mode": state.mode.value,
        "round": state.round,
        "dims": [g.n_in, g.hidden, g.n_out],
        "history": state.history,
        "triggered": state.triggered,
        "trigger_round": state.trigger_round,
        "client_cluster": {str(k): v for k, v in sorted(state.client_cluster.items())},
        "client_samples": {str(k): v for k, v in sorted(state.client_samples.items())},
    }
    if state.triggered:
        cs = state.cluster_state
        arrays.update({
            "reference": state.reference_model.params,
            "clusters": np.stack([m.params for m in state.cluster_models]),
            "centroids": cs.centroids,
            "full_centroids": cs.full_centroids,
            "assignment": cs.assignment,
            "bounds_lo": state.bounds.m_minus,
            "bounds_hi": state.bounds.m_plus,
            "pca_mean": state.pca.mean,
            "pca_components": state.pca.components,
        })
        meta["M"] = cs.M
        meta["epsilon"] = cs.epsilon
    np.savez(out / "state.npz", **arrays)
    (out / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_state(run_dir) -> FederationState:
    run = Path(run_dir)
    try:
        meta = json.loads((run / "state.json").read_text(encoding="utf-8"))
        arrays = np.load(run / "state.npz")
    except FileNotFoundError as exc:
        raise ConfigurationError(f"out: no trained state in {run} ({exc.filename})") from None
    n_in, hidden, n_out = meta["dims"]
    base = MlpModel.zeros(n_in, hidden, n_out)
    state = FederationState(
        mode=Mode.parse(meta["mode"]),
        global_model=base.with_params(arrays["global"]),
        round=meta["round"],
        history=list(meta["history"]),
        triggered=meta["triggered"],
        trigger_round=meta["trigger_round"],
        client_cluster={int(k): v for k, v in meta["client_cluster"].items()},
        client_samples={int(k): v for k, v in meta["client_samples"].items()},
    )
    if state.triggered:
        state.reference_model = base.with_params(arrays["reference"])
        state.cluster_models = [base.with_params(p) for p in arrays["clusters"]]
        state.cluster_state = ClusterState(meta["M"], arrays["assignment"], arrays["centroids"],
                                           arrays["full_centroids"], meta["epsilon"])
        state.bounds = AlignmentBounds(arrays["bounds_lo"], arrays["bounds_hi"])
        state.pca = PcaMap(arrays["pca_mean"], arrays["pca_components"])
    return state
