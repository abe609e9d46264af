"""Flat `key = value` config files and canonical config text.

One file configures both the model and the run.  Lines are `key = value`,
`#` starts a comment, blank lines are skipped, and unknown keys are an
error so typos fail loudly.  Integer tuples are comma-separated
(`spatial_widths = 16,32,64`), booleans are true/false.
"""

from __future__ import annotations

import dataclasses

from .model import ModelConfig
from .optim import TrainConfig


class ConfigError(ValueError):
    """Unknown key or unparseable value."""


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(field: dataclasses.Field, raw: str):
    default = field.default
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{field.name}: expected true/false, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v.strip()) for v in raw.split(","))
    return raw


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_kwargs = {}
    train_kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _parse_value(_MODEL_FIELDS[key], raw)
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _parse_value(_TRAIN_FIELDS[key], raw)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def model_config_text(cfg: ModelConfig) -> str:
    """Canonical (sorted-key) serialization; the checkpoint digest covers it."""
    lines = [
        f"{name} = {_format_value(getattr(cfg, name))}" for name in sorted(_MODEL_FIELDS)
    ]
    return "\n".join(lines) + "\n"
