"""Config files: one JSON document with model, train, and generate sections,
plus dotted-path command-line overrides (overrides win)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .autodiff import ContractError
from .model import ModelConfig
from .synthetic import GenConfig
from .training import TrainConfig

FORMAT_VERSION = 1


@dataclass
class AppConfig:
    model: ModelConfig
    train: TrainConfig
    generate: GenConfig

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(),
                "train": self.train.to_dict(),
                "generate": self.generate.to_dict()}


def default_config() -> AppConfig:
    return AppConfig(ModelConfig(), TrainConfig(), GenConfig())


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "generate": GenConfig}


def load_config(path=None) -> AppConfig:
    """Defaults, with any sections/fields present in ``path`` replacing them."""
    cfg = default_config().to_dict()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ContractError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ContractError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise ContractError(f"config file {path} must hold a JSON object")
        for section, values in doc.items():
            if section not in _SECTIONS:
                raise ContractError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ContractError(f"config section {section!r} must be an object")
            for key, value in values.items():
                if key not in cfg[section]:
                    raise ContractError(f"unknown config field {section}.{key}")
                cfg[section][key] = value
    return _build(cfg)


def apply_overrides(cfg: AppConfig, assignments: list[str]) -> AppConfig:
    """Apply ``section.field=value`` strings; values parse as JSON when possible."""
    doc = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ContractError(f"override {item!r} is not of the form section.field=value")
        target, raw = item.split("=", 1)
        if "." not in target:
            raise ContractError(f"override {item!r} is not of the form section.field=value")
        section, key = target.split(".", 1)
        if section not in doc:
            raise ContractError(f"unknown config section {section!r}")
        if key not in doc[section]:
            raise ContractError(f"unknown config field {section}.{key}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc[section][key] = value
    return _build(doc)


def _build(doc: dict) -> AppConfig:
    built = {}
    for section, cls in _SECTIONS.items():
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        values = doc[section]
        extra = set(values) - set(fields)
        if extra:
            raise ContractError(f"unknown config field {section}.{sorted(extra)[0]}")
        try:
            built[section] = cls(**values)
        except (TypeError, ValueError) as e:
            raise ContractError(f"bad {section} config: {e}")
    return AppConfig(**built)
