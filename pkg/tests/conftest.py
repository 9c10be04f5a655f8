import functools
import json
import time
from pathlib import Path

import pytest

from fluxfl.federation import ExperimentConfig, run_experiment
from fluxfl.harness.config import federation_for

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
SEEDS = (42, 43, 44, 45, 46)
# Wall seconds of the first (uncached) computation of each cached run.
RUN_SECONDS: dict = {}


def config_from(name: str, **overrides) -> ExperimentConfig:
    data = json.loads((CONFIGS / name).read_text())
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


@functools.lru_cache(maxsize=None)
def cached_run(name: str, overrides: tuple = ()):
    """Config, federation and experiment result; shared across test modules."""
    t0 = time.perf_counter()
    config = config_from(name, **dict(overrides))
    fed = federation_for(config)
    result = run_experiment(config, fed)
    RUN_SECONDS[(name, overrides)] = time.perf_counter() - t0
    return config, fed, result


@pytest.fixture(scope="session")
def blob_runs():
    return {seed: cached_run("default.json", (("seed", seed),)) for seed in SEEDS}
