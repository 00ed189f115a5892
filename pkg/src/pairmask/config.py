"""YAML config files mirroring the model/train dataclasses.

Layout: a ``model:`` section with ModelConfig fields and a ``train:``
section with TrainConfig fields (``loss_weights`` and ``substitution`` as
nested mappings). Unknown keys are an error; dotted overrides such as
``train.base_lr=1e-4`` are applied after the file parse.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .losses import LossWeights
from .masking import SubstitutionSchedule
from .model import ModelConfig
from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, mapping: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in mapping.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path}.{key}")
        if key == "loss_weights":
            val = _build(LossWeights, val or {}, f"{path}.{key}")
        elif key == "substitution":
            val = _build(SubstitutionSchedule, val or {}, f"{path}.{key}")
        kwargs[key] = val
    return cls(**kwargs)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping: {path}")
    for key in raw:
        if key not in ("model", "train"):
            raise ConfigError(f"unknown config section {key!r}")
    model = _build(ModelConfig, raw.get("model") or {}, "model")
    train = _build(TrainConfig, raw.get("train") or {}, "train")
    return model, train


def apply_overrides(
    model: ModelConfig, train: TrainConfig, overrides: list[str]
) -> tuple[ModelConfig, TrainConfig]:
    """Apply ``section.key[=subkey]=value`` overrides, re-validating."""
    model_d = dataclasses.asdict(model)
    train_d = dataclasses.asdict(train)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        dotted, _, raw_val = item.partition("=")
        parts = dotted.split(".")
        if parts[0] == "model":
            target = model_d
        elif parts[0] == "train":
            target = train_d
        else:
            raise ConfigError(f"unknown config section in override {item!r}")
        node = target
        for p in parts[1:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = yaml.safe_load(raw_val)
    new_model = _build(ModelConfig, model_d, "model")
    new_train = _build(TrainConfig, train_d, "train")
    return new_model, new_train


def default_toy_configs(seed: int = 0) -> tuple[ModelConfig, TrainConfig]:
    return ModelConfig.toy(), TrainConfig.toy(seed)
