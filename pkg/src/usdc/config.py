"""Experiment configuration: one YAML file holding model, training, data, paths and ablation settings."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .trainer import TrainConfig
from .vit import ViTConfig

SEED_ENV = "USDC_SEED"


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class DataConfig:
    n_train: int = 2048
    n_test: int = 512
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    # None selects the built-in shapes-10 generator; otherwise a .npz file or image directory
    dataset: str | None = None


@dataclass
class AblationConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    inference_batch_sizes: list[int] = field(default_factory=lambda: [64, 8, 1])
    strategies: list[str] = field(default_factory=lambda: ["sample", "batch", "group"])
    split_methods: list[str] = field(default_factory=lambda: ["avg-32", "avg-8", "random", "recursive"])
    # largest and smallest decision networks in the candidate table
    manual_gates: list[int] = field(default_factory=lambda: [0, 3])

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("ablation.seeds must not be empty")
        if any(int(b) < 1 for b in self.inference_batch_sizes):
            raise ValueError("inference batch sizes must be positive")


_SECTIONS = {
    "model": ViTConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "paths": PathsConfig,
    "ablation": AblationConfig,
}


@dataclass
class ExperimentConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}; expected {sorted(_SECTIONS)}")
        parts = {}
        for name, typ in _SECTIONS.items():
            section = raw.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            allowed = {f.name for f in fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in '{name}': {sorted(bad)}; allowed: {sorted(allowed)}")
            try:
                parts[name] = typ(**section)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid '{name}' section: {e}") from e
        return cls(**parts)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed YAML: {e}") from e
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Read a YAML config; ``USDC_SEED`` in ``env`` overrides both training and data seeds."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = ExperimentConfig.from_yaml(path.read_text())
    return apply_env(cfg, os.environ if env is None else env)


def apply_env(cfg: ExperimentConfig, env) -> ExperimentConfig:
    value = env.get(SEED_ENV)
    if value is None or value == "":
        return cfg
    try:
        seed = int(value)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from e
    cfg.train.seed = seed
    cfg.data.seed = seed
    return cfg
