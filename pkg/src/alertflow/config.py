"""Configuration: one INI-style file, sections of key/value pairs.

Every key has a documented default; environment variables override file
values as ``<SECTION>_<KEY>`` in upper case (e.g. ``PIPELINE_DELIVERY_MODE``).
Unknown sections or keys, and values that fail to parse, raise ConfigError
naming the offending field.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .runtime import MODE_ACK, MODE_FIRE_AND_FORGET


@dataclass
class PipelineSettings:
    input_sources: int = 1        # L in the architecture diagram
    models: int = 1               # N (a single model is exercised)
    topics_of_interest: int = 1   # X
    sampling_divisor: int = 100
    claim_threshold: int = 900_000
    delivery_mode: str = MODE_ACK
    max_retries: int = 5
    retrain_period_seconds: float = 21_600.0
    staging_enabled: bool = False
    feature_dimension: int = 2500
    hash_seed: int = 0
    data_dir: str = "./alertflow-data"
    sink: str = ""  # "file:<path>" or "url:<endpoint>"; default file under data_dir
    topic_raw: str = "L1.raw"
    topic_converted: str = "L2.converted"
    topic_new_incidents: str = "L4.new-incidents"
    topic_features: str = "L6.features"
    topic_retrain: str = "L6.retrain"


@dataclass
class ModelSettings:
    n_trees: int = 100
    max_depth: int = 16
    min_samples_split: int = 2
    n_candidate_features: int = 0  # 0 means floor(sqrt(d))
    seed: int = 0


@dataclass
class WorkloadSettings:
    rate_per_minute: float = 120.0
    duration_seconds: float = 60.0
    seed: int = 0
    services: int = 2000
    true_alert_fraction: float = 0.3
    signal_strength: float = 0.8
    emit_lifecycle: bool = True


@dataclass
class HttpSettings:
    host: str = "127.0.0.1"
    port: int = 8080


@dataclass
class RuntimeSettings:
    max_concurrency: int = 64
    simulated_clock: bool = False


@dataclass
class AppConfig:
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    workload: WorkloadSettings = field(default_factory=WorkloadSettings)
    http: HttpSettings = field(default_factory=HttpSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    def validate(self) -> "AppConfig":
        p = self.pipeline
        for name in ("input_sources", "models", "topics_of_interest", "sampling_divisor"):
            if getattr(p, name) < 1:
                raise ConfigError(f"pipeline.{name} must be >= 1")
        if p.delivery_mode not in (MODE_ACK, MODE_FIRE_AND_FORGET):
            raise ConfigError(
                f"pipeline.delivery_mode must be {MODE_ACK!r} or "
                f"{MODE_FIRE_AND_FORGET!r}, got {p.delivery_mode!r}"
            )
        if not 0 < p.claim_threshold <= 1_048_576:
            raise ConfigError("pipeline.claim_threshold must be in (0, 1048576]")
        if p.retrain_period_seconds <= 0:
            raise ConfigError("pipeline.retrain_period_seconds must be positive")
        if self.model.n_trees < 1:
            raise ConfigError("model.n_trees must be >= 1")
        if self.workload.services < 1:
            raise ConfigError("workload.services must be >= 1")
        return self

    @property
    def sink_target(self) -> tuple[str, str]:
        """(scheme, target): file path or URL for the notification sink."""
        raw = self.pipeline.sink or f"file:{Path(self.pipeline.data_dir) / 'sink.jsonl'}"
        scheme, _, rest = raw.partition(":")
        if scheme not in ("file", "url") or not rest:
            raise ConfigError(f"pipeline.sink must look like file:<path> or url:<endpoint>, got {raw!r}")
        return scheme, rest


_SECTIONS = {
    "pipeline": PipelineSettings,
    "model": ModelSettings,
    "workload": WorkloadSettings,
    "http": HttpSettings,
    "runtime": RuntimeSettings,
}


def _coerce(section: str, key: str, raw: str, target_type: type):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return target_type(raw)
    except ValueError as e:
        raise ConfigError(f"{section}.{key}: {e}") from e


def load_config(path: str | Path | None = None, environ: dict | None = None) -> AppConfig:
    """Build an AppConfig from defaults, then the file, then the environment."""
    config = AppConfig()
    environ = environ if environ is not None else os.environ

    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with Path(path).open(encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config file {path}: {e}") from e
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            settings = getattr(config, section)
            valid = {f.name: f.type for f in fields(settings)}
            for key, raw in parser.items(section):
                if key not in valid:
                    raise ConfigError(f"unknown key {section}.{key}")
                current = getattr(settings, key)
                setattr(settings, key, _coerce(section, key, raw, type(current)))

    for section, cls in _SECTIONS.items():
        settings = getattr(config, section)
        for f in fields(cls):
            env_key = f"{section}_{f.name}".upper()
            if env_key in environ:
                current = getattr(settings, f.name)
                setattr(settings, f.name, _coerce(section, f.name, environ[env_key], type(current)))

    return config.validate()
