"""Experiment configuration: one YAML file, dotted flag overrides, and defaults.

Precedence is flags > environment (output directory only) > file > defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .decision import DecisionConfig
from .errors import ConfigError
from .training import TrainConfig
from .world import SimConfig

OUTPUT_ENV = "CDUM_OUTPUT_DIR"
SOURCES = ("synth", "world", "csv")


@dataclass
class DataConfig:
    source: str = "synth"
    path: str | None = None
    schema: str = "generic"
    user_count: int = 10_000
    feature_count: int = 8
    treatment_count: int = 2
    noise: float = 1.0
    effect_scale: float = 0.3
    warmup_days: int = 7
    rct_days: int = 7
    request_days: list[int] = field(default_factory=lambda: [2, 2, 2])


@dataclass
class CpmSection:
    expert_count: int = 3
    embedding_dim: int = 32
    hidden_dim: int = 64
    view_dim: int = 32
    tower_hidden_dim: int = 64
    use_indicator: bool = True
    use_guidance: bool = True


@dataclass
class FicSection:
    expert_count: int = 3
    embedding_dim: int = 32
    hidden_dim: int = 64
    expert_dim: int = 32
    tower_hidden_dim: int = 64


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    cpm: CpmSection = field(default_factory=CpmSection)
    fic: FicSection = field(default_factory=FicSection)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fic_train: TrainConfig = field(default_factory=TrainConfig)
    h: float = 30.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


_SECTIONS = {"data": DataConfig, "cpm": CpmSection, "fic": FicSection, "decision": DecisionConfig,
             "sim": SimConfig, "train": TrainConfig, "fic_train": TrainConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_scalar(value)
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                env: dict[str, str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        raw["output_dir"] = env[OUTPUT_ENV]
    raw = apply_overrides(raw, overrides or [])
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if raw.get("seed") is None:
        raise ConfigError("seed is mandatory")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    try:
        seed = int(raw["seed"])
        h = float(raw.get("h", 30.0))
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer and h a number") from None
    cfg = ExperimentConfig(seed=seed, output_dir=str(raw.get("output_dir", "runs")), h=h, **kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if d.source not in SOURCES:
        raise ConfigError(f"data.source must be one of {SOURCES}, got {d.source!r}")
    if d.source == "csv":
        if not d.path:
            raise ConfigError("data.path is required when data.source is csv")
        if not Path(d.path).exists():
            raise ConfigError(f"data.path {d.path} does not exist")
    if d.schema not in ("generic", "criteo_uplift"):
        raise ConfigError(f"data.schema must be generic or criteo_uplift, got {d.schema!r}")
    if not 0 < cfg.h <= 100:
        raise ConfigError("h must lie in (0, 100]")
    if any(n < 0 for n in d.request_days):
        raise ConfigError("data.request_days entries must be >= 0")
