import csv
import json
import logging

import pytest

from fluxfl.harness import cli
from fluxfl.harness.config import RunManifest, config_hash, load_config
from fluxfl.harness.io import METRICS_COLUMNS, load_state, read_csv
from fluxfl.harness.sweep import SweepSpec, summarize

from conftest import CONFIGS

TINY = {"shift_type": "feature", "level": 5, "num_distributions": 3, "K": 9, "U": 4, "z": 16,
        "per_client_samples": 100, "hidden": 12, "pca_dim": 4, "rounds": 5, "lr": 0.05, "noise": 0.1,
        "color_shift": 20.0, "test_per_distribution": 2}


def write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def test_config_hash_ignores_key_order():
    a = {"shift_type": "feature", "K": 12, "level": 2}
    b = {"level": 2, "K": 12, "shift_type": "feature"}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "K": 11})


def test_load_config_overrides(tmp_path):
    cfg = load_config(write(tmp_path / "c.json", TINY), mode="fedavg", seed=7, dp_epsilon=None)
    assert cfg.mode.value == "fedavg" and cfg.seed == 7 and cfg.dp_epsilon is None


def test_manifest_fields(tmp_path):
    m = RunManifest("abc")
    m.finish()
    data = json.loads(m.write(tmp_path / "m.json").read_text())
    assert {"config_hash", "tool_version", "started_at", "finished_at", "outputs"} <= set(data)


def test_gen_data_default_fixture(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-data", "--config", str(CONFIGS / "default.json"), "--out", str(out_a)]) == 0
    assert cli.main(["gen-data", "--config", str(CONFIGS / "default.json"), "--out", str(out_b)]) == 0
    clients = sorted(out_a.glob("client_*.bin"))
    assert len(clients) == 12 and (out_a / "manifest.json").exists()
    for f in out_a.iterdir():
        assert f.read_bytes() == (out_b / f.name).read_bytes()


def test_missing_shift_type_exits_2(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {"K": 12})
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "shift_type" in capsys.readouterr().err


def test_invalid_field_is_named(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", {**TINY, "participation_rate": 2})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "participation_rate" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.main(["train", "--mode", "fedprox"])
    assert err.value.code == 2
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--config", write(tmp_path / "c.json", TINY), "--out", str(tmp_path / "o"),
                     "--threads", "0"]) == 2


def test_missing_data_dir_is_config_error(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    assert cli.main(["train", "--config", cfg, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_eval_roundtrip(tmp_path):
    cfg = str(CONFIGS / "default.json")
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(data)]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(run)]) == 0
    row = read_csv(run / "metrics.csv")[0]
    assert list(row) == list(METRICS_COLUMNS)
    assert row["M_found"] == "3" and row["M_true"] == "3"
    lines = (run / "rounds.jsonl").read_text().splitlines()
    assert len(lines) == 10 and sum(json.loads(x)["triggered"] for x in lines) == 1
    state = load_state(run)
    assert state.triggered and state.cluster_state.M == 3
    assert cli.main(["eval", "--data", str(data), "--out", str(run)]) == 0
    ev = read_csv(run / "eval.csv")[0]
    assert ev["known_assoc_acc"] == row["known_assoc_acc"]
    assert ev["test_phase_acc"] == row["test_phase_acc"]

    rerun = tmp_path / "rerun"
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(rerun)]) == 0
    again = read_csv(rerun / "metrics.csv")[0]
    assert {k: v for k, v in again.items() if k != "wall_time_ms"} == \
        {k: v for k, v in row.items() if k != "wall_time_ms"}
    assert (rerun / "rounds.jsonl").read_bytes() == (run / "rounds.jsonl").read_bytes()


def test_train_fedavg_reports_one_cluster(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--mode", "fedavg"]) == 0
    assert read_csv(tmp_path / "o" / "metrics.csv")[0]["M_found"] == "1"


def test_eval_without_training_fails(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    assert cli.main(["eval", "--config", cfg, "--out", str(tmp_path / "empty")]) == 2


def test_concept_shift_metrics_mark_na(tmp_path):
    cfg = write(tmp_path / "c.json", {**TINY, "shift_type": "concept_y_given_x", "level": 3})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert read_csv(tmp_path / "o" / "metrics.csv")[0]["test_phase_acc"] == "NA"


def test_sweep_single_cell(tmp_path):
    sweep = write(tmp_path / "s.json", {"base": TINY, "modes": ["flux"], "seeds": [42]})
    assert cli.main(["sweep", "--config", sweep, "--out", str(tmp_path / "o")]) == 0
    summary = read_csv(tmp_path / "o" / "summary.csv")
    assert len(summary) == 1 and summary[0]["status"] == "ok"
    metrics = read_csv(tmp_path / "o" / "metrics.csv")
    assert float(summary[0]["known_assoc_mean"]) == float(metrics[0]["known_assoc_acc"])
    assert float(summary[0]["known_assoc_std"]) == 0.0


def test_sweep_marks_failed_cell_and_continues(tmp_path):
    # Label shift at level 8 with U=4 keeps fewer than two classes: that cell fails.
    sweep = write(tmp_path / "s.json", {"base": TINY, "modes": ["fedavg"], "shift_types": ["feature", "label"],
                                        "levels": [2, 8], "seeds": [42, 43]})
    assert cli.main(["sweep", "--config", sweep, "--out", str(tmp_path / "o")]) == 0
    summary = {(r["shift_type"], r["level"]): r for r in read_csv(tmp_path / "o" / "summary.csv")}
    assert summary[("feature", "2")]["status"] == "ok" and summary[("feature", "2")]["n_runs"] == "2"
    assert summary[("label", "8")]["status"] == "failed" and "level" in summary[("label", "8")]["error"]
    assert summary[("label", "2")]["status"] == "ok"


def test_sweep_requires_seeds():
    with pytest.raises(Exception, match="seeds"):
        SweepSpec.from_dict({"base": {"shift_type": "feature"}, "seeds": []})


def test_summary_population_std():
    rows = [{"known_assoc_acc": 1.0, "test_phase_acc": None, "M_found": 3},
            {"known_assoc_acc": 3.0, "test_phase_acc": None, "M_found": 3}]
    s = summarize(("flux", "feature", 5), rows, [])
    assert s["known_assoc_mean"] == 2.0 and s["known_assoc_std"] == 1.0
    assert s["test_phase_mean"] is None and s["M_found_std"] == 0.0


def test_verify_selectors(capsys):
    assert cli.main(["verify", "prop1"]) == 0
    assert "PASS prop1: 10000/10000" in capsys.readouterr().out
    assert cli.main(["verify", "nonexistent"]) == 2


def test_verify_all_under_a_minute(capsys):
    import time

    t0 = time.perf_counter()
    assert cli.main(["verify", "all"]) == 0
    assert time.perf_counter() - t0 < 60
    out = capsys.readouterr().out
    for name in ("prop1", "bures", "dp", "partition", "gradcheck", "metric"):
        assert f"PASS {name}" in out


def test_log_level_from_environment(monkeypatch):
    monkeypatch.setenv("FLUX_FED_LOG", "debug")
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    root.handlers.clear()
    try:
        cli._setup_logging()
        assert root.level == logging.DEBUG
    finally:
        root.handlers[:], root.level = saved[0], saved[1]


def test_metrics_csv_header_order(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
    with open(tmp_path / "o" / "metrics.csv") as fh:
        assert next(csv.reader(fh)) == list(METRICS_COLUMNS)
