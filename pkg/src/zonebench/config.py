"""Run configuration: a flat TOML file with dotted sections.

Example::

    data_root = "data"
    output_root = "runs"
    seed = 0
    augmentation_seed = 0
    reference_model = "R2U_NET"
    train.epochs = 100
    train.batch_size = 6
    models.R2U_NET.architecture = "R2U_NET"
    models.R2U_NET.base_filters = 64

Relative paths resolve against the config file's directory. Unknown keys
and wrongly typed values are :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .models import ModelConfig

TOP_LEVEL = {
    "data_root": str,
    "output_root": str,
    "seed": int,
    "augmentation_seed": int,
    "reference_model": str,
}
TRAIN_KEYS = {"epochs": int, "batch_size": int, "learning_rate": float, "train_fraction": float, "shuffle_seed": int, "stop_loss": float}
MODEL_KEYS = {
    "architecture": str,
    "base_filters": int,
    "depth": int,
    "recurrence_steps": int,
    "dense_layers_per_block": int,
    "dense_growth_rate": int,
    "num_classes": int,
    "init_seed": int,
    "input_size": int,
}


def _check(key: str, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if (kind is int and isinstance(value, bool)) or not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


@dataclass
class RunConfig:
    data_root: Path
    output_root: Path
    seed: int = 0
    augmentation_seed: int = 0
    train: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)  # name -> raw ModelConfig fields
    reference_model: str = "R2U_NET"

    def to_dict(self) -> dict:
        return {
            "data_root": str(self.data_root),
            "output_root": str(self.output_root),
            "seed": self.seed,
            "augmentation_seed": self.augmentation_seed,
            "reference_model": self.reference_model,
            "train": dict(self.train),
            "models": {k: dict(v) for k, v in self.models.items()},
        }

    def digest(self) -> str:
        """Content hash of everything that shapes the outputs (paths excluded)."""
        d = self.to_dict()
        d.pop("output_root")
        d.pop("data_root")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def model_config(self, name: str) -> ModelConfig:
        raw = dict(self.models[name])
        raw.setdefault("architecture", name)
        return ModelConfig.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        raw = dict(raw)
        train = raw.pop("train", {})
        models = raw.pop("models", {})
        unknown = set(raw) - set(TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("data_root", "output_root"):
            if key not in raw:
                raise ConfigError(f"missing required key {key!r}")
        values = {k: _check(k, v, TOP_LEVEL[k]) for k, v in raw.items()}
        if not isinstance(train, dict):
            raise ConfigError("train must be a section")
        checked_train = {}
        for k, v in train.items():
            if k not in TRAIN_KEYS:
                raise ConfigError(f"unknown config key train.{k}")
            checked_train[k] = _check(f"train.{k}", v, TRAIN_KEYS[k])
        if not isinstance(models, dict) or not models:
            raise ConfigError("at least one models.<name> section is required")
        checked_models = {}
        for name, fields in models.items():
            if not isinstance(fields, dict):
                raise ConfigError(f"models.{name} must be a section")
            entry = {}
            for k, v in fields.items():
                if k not in MODEL_KEYS:
                    raise ConfigError(f"unknown config key models.{name}.{k}")
                entry[k] = _check(f"models.{name}.{k}", v, MODEL_KEYS[k])
            checked_models[name] = entry
        base = Path(base_dir) if base_dir is not None else Path(".")
        cfg = cls(
            data_root=(base / values.pop("data_root")).resolve(),
            output_root=(base / values.pop("output_root")).resolve(),
            train=checked_train,
            models=checked_models,
            **values,
        )
        if cfg.reference_model not in cfg.models:
            raise ConfigError(
                f"reference_model {cfg.reference_model!r} is not one of the configured models {sorted(cfg.models)}"
            )
        return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig.from_dict(raw, base_dir=path.parent)
    if not cfg.data_root.exists():
        raise ConfigError(f"data_root does not exist: {cfg.data_root}")
    return cfg
