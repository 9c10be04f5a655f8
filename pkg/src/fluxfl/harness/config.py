"""Configuration files, config hashing and run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__
from ..datagen import Federation, generate_federation
from ..federation import ExperimentConfig
from ..numcore import ConfigurationError


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config: invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    return data


def apply_overrides(data: dict, **overrides) -> dict:
    """Copy of ``data`` with every non-None override set (CLI flags win over the file)."""
    out = dict(data)
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def load_config(path, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(apply_overrides(read_json(path), **overrides))


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    data = config.to_dict() if isinstance(config, ExperimentConfig) else config
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def federation_for(config: ExperimentConfig) -> Federation:
    """Synthetic federation described by the generator keys of ``config``."""
    return generate_federation(config.K, config.U, config.z, config.per_client_samples, config.shift,
                               config.seed, config.test_per_distribution, config.class_sep,
                               config.plane_radius, config.noise, config.color_shift)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    metrics_schema: int = 1

    def finish(self) -> None:
        self.finished_at = _now()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
