"""Pipeline configuration, validation, and provenance sidecars.

The config file is versioned YAML; CLI flags override file values. Every
artifact gets a ``<name>.provenance.json`` sidecar carrying the config
hash, seed, and package versions. Sidecars deliberately contain no wall
clock so reruns of the same configuration are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__

SCHEMA_VERSION = 1
WORKERS_ENV_VAR = "FIELDPIPE_WORKERS"


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration."""


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    out_dir: str = "out"
    tiles: list = field(default_factory=list)  # {tile_id, planting, harvest} or scene manifests
    adm0: str | None = None
    consensus_dir: str | None = None
    sos: str | None = None
    eos: str | None = None
    backend: str = "synthetic"
    cloud_threshold: float = 0.20
    confidence_threshold: float = 0.4
    min_pixels: int = 4
    crop_filter: str = "le2"
    feature_set: str = "model_only"
    year: int = 2025
    seed: int = 0
    parallelism: int = 0  # 0 = use env var / 1

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        if not 0.0 <= self.cloud_threshold <= 1.0:
            raise ConfigError(f"cloud_threshold {self.cloud_threshold} outside [0, 1]")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError(f"confidence_threshold {self.confidence_threshold} outside [0, 1]")
        if self.min_pixels < 1:
            raise ConfigError("min_pixels must be >= 1")
        if self.crop_filter not in ("none", "le3", "le2", "le1"):
            raise ConfigError(f"unknown crop_filter {self.crop_filter!r}")
        if self.parallelism < 0:
            raise ConfigError("parallelism must be >= 0")

    @property
    def workers(self) -> int:
        if self.parallelism > 0:
            return self.parallelism
        env = os.environ.get(WORKERS_ENV_VAR)
        return max(1, int(env)) if env else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} is not a mapping")
        return cls.from_dict(data)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def write_sidecar(artifact_path, config: PipelineConfig | None = None, **extra) -> Path:
    """Provenance sidecar next to an artifact (deterministic bytes)."""
    artifact_path = Path(artifact_path)
    payload = {
        "artifact": artifact_path.name,
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    if config is not None:
        payload["config_hash"] = config.config_hash()
        payload["seed"] = config.seed
    payload.update(extra)
    sidecar = artifact_path.with_name(artifact_path.name + ".provenance.json")
    sidecar.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))
    return sidecar
