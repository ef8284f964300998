"""One JSON-backed config tree for the command line.

Sections mirror the library dataclasses. Loading rejects unknown keys by
their dotted path instead of ignoring them; dotted-path overrides coerce
the string to the type of the field's default value.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .model import ModelConfig
from .runtime import RuntimeConfig
from .scenario import AugmentConfig
from .training import TrainConfig


@dataclass
class BankConfig:
    num_base: int = 16
    num_novel: int = 6
    alignment: float = 0.9
    crops_per_category: int = 4
    seed: int = 7

    def validate(self) -> None:
        if self.num_base < 1:
            raise ValueError("num_base must be at least 1")
        if self.num_novel < 0:
            raise ValueError("num_novel must be non-negative")
        if not 0.0 < self.alignment <= 1.0:
            raise ValueError(f"alignment {self.alignment} outside (0, 1]")
        if self.crops_per_category < 1:
            raise ValueError("crops_per_category must be at least 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        self.model.validate()
        self.bank.validate()
        self.train.validate()
        self.runtime.validate()
        self.augment.validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def _fill_section(section: Any, values: dict, path: str) -> None:
    known = {f.name: f for f in fields(section)}
    for key, value in values.items():
        dotted = f"{path}.{key}" if path else key
        if key not in known:
            raise ValueError(f"unknown config key: {dotted}")
        default = getattr(section, key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            value = bool(value)
        elif isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and value != int(value):
                raise ValueError(f"config key {dotted} expects an integer, got {value}")
            value = int(value)
        elif isinstance(default, float):
            value = float(value)
        setattr(section, key, value)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, value in data.items():
        if key not in sections:
            raise ValueError(f"unknown config key: {key}")
        if not isinstance(value, dict):
            raise ValueError(f"config section {key} must be an object")
        _fill_section(sections[key], value, key)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"malformed config {path}: top level must be an object")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_json(cfg))


def _coerce_like(text: str, default: Any, dotted: str) -> Any:
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {dotted} expects a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        elem = default[0] if default else 0
        caster = int if isinstance(elem, int) else float
        return tuple(caster(p) for p in parts)
    return text


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one ``section.key=value`` override in place."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not of the form key.path=value")
    dotted, text = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2:
        raise ValueError(f"override key {dotted!r} must be section.field")
    section_name, key = parts
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    if section_name not in sections:
        raise ValueError(f"unknown config key: {dotted.strip()}")
    section = sections[section_name]
    known = {f.name for f in fields(section)}
    if key not in known:
        raise ValueError(f"unknown config key: {dotted.strip()}")
    default = getattr(section, key)
    setattr(section, key, _coerce_like(text, default, dotted.strip()))
