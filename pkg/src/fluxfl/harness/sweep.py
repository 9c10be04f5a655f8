"""Grid sweeps over mode x shift type x level, repeated across seeds."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..federation import ExperimentConfig, ExperimentResult, run_experiment
from ..numcore import ConfigurationError
from .config import config_hash, federation_for
from .io import METRICS_COLUMNS, write_csv, write_round_log

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("mode", "shift_type", "level", "status", "n_runs", "n_failed", "known_assoc_mean",
                   "known_assoc_std", "test_phase_mean", "test_phase_std", "M_found_mean", "M_found_std", "error")
GRID_KEYS = ("modes", "shift_types", "levels", "seeds")


@dataclass(frozen=True)
class SweepSpec:
    base: dict
    modes: tuple[str, ...]
    shift_types: tuple[str, ...]
    levels: tuple[int, ...]
    seeds: tuple[int, ...]

    @classmethod
    def from_dict(cls, data: dict) -> SweepSpec:
        unknown = sorted(set(data) - set(GRID_KEYS) - {"base"})
        if unknown:
            raise ConfigurationError(f"{unknown[0]}: unknown sweep key")
        base = dict(data.get("base", {}))
        if not isinstance(base, dict):
            raise ConfigurationError("base: must be a JSON object")

        def grid(key, fallback):
            values = data.get(key)
            if values is None:
                values = [fallback] if fallback is not None else []
            if not isinstance(values, list):
                raise ConfigurationError(f"{key}: must be a list")
            return tuple(values)

        seeds = grid("seeds", base.get("seed"))
        if not seeds:
            raise ConfigurationError("seeds: at least one seed is required")
        shifts = grid("shift_types", base.get("shift_type"))
        if not shifts:
            raise ConfigurationError("shift_type: required (in base or shift_types)")
        return cls(base, grid("modes", base.get("mode", "flux")), shifts, grid("levels", base.get("level", 1)),
                   seeds)

    def cells(self):
        return list(itertools.product(self.modes, self.shift_types, self.levels))


def run_id_for(config: ExperimentConfig) -> str:
    return f"{config.mode.value}-{config.shift_type.value}-l{config.level}-s{config.seed}-{config_hash(config)[:8]}"


def metrics_row(run_id: str, config: ExperimentConfig, result: ExperimentResult) -> dict:
    return {
        "run_id": run_id,
        "mode": config.mode.value,
        "shift_type": config.shift_type.value,
        "level": config.level,
        "seed": config.seed,
        "known_assoc_acc": result.known_assoc_acc,
        "test_phase_acc": result.test_phase_acc,
        "M_found": result.M_found,
        "M_true": result.M_true,
        "wall_time_ms": round(result.wall_time_ms, 3),
    }


def _stats(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(cell: tuple, rows: list[dict], errors: list[str]) -> dict:
    mode, shift, level = cell
    known = _stats(r["known_assoc_acc"] for r in rows)
    test = _stats(r["test_phase_acc"] for r in rows)
    found = _stats(r["M_found"] for r in rows)
    return {
        "mode": mode, "shift_type": shift, "level": level,
        "status": "failed" if errors else "ok",
        "n_runs": len(rows), "n_failed": len(errors),
        "known_assoc_mean": known[0], "known_assoc_std": known[1],
        "test_phase_mean": test[0], "test_phase_std": test[1],
        "M_found_mean": found[0], "M_found_std": found[1],
        "error": "; ".join(errors) if errors else "",
    }


def run_sweep(spec: SweepSpec, out_dir, threads: int = 1) -> list[dict]:
    """Run every cell; a failing run marks its cell failed without stopping the sweep."""
    out = Path(out_dir)
    (out / "rounds").mkdir(parents=True, exist_ok=True)
    all_rows: list[dict] = []
    summary: list[dict] = []
    for cell in spec.cells():
        mode, shift, level = cell
        rows, errors = [], []
        for seed in spec.seeds:
            try:
                config = ExperimentConfig.from_dict({**spec.base, "mode": mode, "shift_type": shift,
                                                     "level": level, "seed": seed})
                result = run_experiment(config, federation_for(config), threads)
            except (ConfigurationError, ArithmeticError, RuntimeError) as exc:
                log.warning("cell %s seed %s failed: %s", cell, seed, exc)
                errors.append(f"seed {seed}: {exc}")
                continue
            rid = run_id_for(config)
            write_round_log(out / "rounds" / f"{rid}.jsonl", result.logs)
            rows.append(metrics_row(rid, config, result))
        all_rows.extend(rows)
        summary.append(summarize(cell, rows, errors))
    write_csv(out / "metrics.csv", METRICS_COLUMNS, all_rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    return summary
