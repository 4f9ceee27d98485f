"""Experiment configuration: a JSON document with fixed sections and strict keys."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataConfig:
    corpus: str | None = None  # JSONL path; generated from the fields below when unset
    scenes: int = 1024
    seed: int = 7
    noise: float = 0.05
    latent_dim: int = 8
    test_fraction: float = 0.2
    spacing_m: float = 200.0


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 256
    max_len: int = 64
    n_patches: int = 16
    n_features: int = 8
    seed: int = 0


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 128.0
    seed: int = 1


@dataclass
class PoolingSection:
    strategy: str = "eos"
    seed: int = 2


@dataclass
class LossConfig:
    temperature: float = 0.03
    learnable_temperature: bool = False
    direction: str = "symmetric"


@dataclass
class TrainSection:
    mode: str = "lora"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    distances: list[float] = field(default_factory=lambda: [50.0, 100.0, 150.0])
    conjunctive_localization: bool = False


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "lora": LoraConfig,
    "pooling": PoolingSection,
    "loss": LossConfig,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    pooling: PoolingSection = field(default_factory=PoolingSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.data.scenes < 2:
            raise ConfigError("data.scenes must be >= 2")
        if self.train.mode not in ("lora", "full"):
            raise ConfigError(f"train.mode must be lora or full, got {self.train.mode!r}")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.train.lr > 0 or self.train.weight_decay < 0:
            raise ConfigError("train.lr must be positive and weight_decay non-negative")
        if self.lora.rank < 1 or not self.lora.alpha > 0:
            raise ConfigError("lora.rank must be >= 1 and lora.alpha > 0")
        if self.pooling.strategy not in ("eos", "query", "average"):
            raise ConfigError(f"unknown pooling strategy {self.pooling.strategy!r}")
        if not self.loss.temperature > 0:
            raise ConfigError("loss.temperature must be positive")
        if self.loss.direction not in ("t2i", "symmetric"):
            raise ConfigError(f"unknown loss direction {self.loss.direction!r}")
        if any(k < 1 for k in self.eval.ks) or any(d < 0 for d in self.eval.distances):
            raise ConfigError("eval.ks must be >= 1 and eval.distances >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, klass in _SECTIONS.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(klass)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                sections[name] = klass(**body)
            except TypeError as exc:
                raise ConfigError(f"section {name!r}: {exc}") from exc
        return cls(**sections)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"loss.temperature": 0.1})``."""
        raw = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in raw or name not in raw[section]:
                raise ConfigError(f"unknown config key {key!r}")
            raw[section][name] = value
        return ExperimentConfig.from_dict(raw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    """Read a config file; a relative ``data.corpus`` is resolved against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(raw)
    if cfg.data.corpus and not Path(cfg.data.corpus).is_absolute():
        cfg.data.corpus = str((path.parent / cfg.data.corpus).resolve())
    return cfg
