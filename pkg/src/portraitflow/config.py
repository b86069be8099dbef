"""Flat, typed key=value configuration text.

One `section.key = value` pair per line; `#` starts a comment. The
schema is derived from the three config dataclasses (sections "dit",
"enc", "train"), so every key has a declared type and unknown keys are
rejected. Floats are written with repr, which round-trips exactly.
Environment variables are never consulted.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Tuple

from .encoders import EncoderConfig
from .model import DiTConfig
from .training import TrainConfig

SECTIONS = {"dit": DiTConfig, "enc": EncoderConfig, "train": TrainConfig}

_EXTRA_KEYS = {
    "norm.facial_min": float, "norm.facial_max": float,
    "norm.body_min": float, "norm.body_max": float,
    "state.step": int, "state.adam_count": int,
}


def config_schema() -> Dict[str, type]:
    schema = dict(_EXTRA_KEYS)
    for section, cls in SECTIONS.items():
        for field in dataclasses.fields(cls):
            if field.type in ("int", int):
                schema[f"{section}.{field.name}"] = int
            elif field.type in ("float", float):
                schema[f"{section}.{field.name}"] = float
            elif field.type in ("bool", bool):
                schema[f"{section}.{field.name}"] = bool
            else:
                schema[f"{section}.{field.name}"] = str
    return schema


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    return typ(raw)


def dump_flat(values: Dict[str, object]) -> str:
    lines = [f"{key} = {format_value(values[key])}" for key in sorted(values)]
    return "\n".join(lines) + "\n"


def parse_flat(text: str) -> Dict[str, object]:
    """Parse and type-check config text against the schema."""
    schema = config_schema()
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in schema:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = parse_value(raw, schema[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return values


def configs_to_flat(dit: DiTConfig, enc: EncoderConfig,
                    train: TrainConfig) -> Dict[str, object]:
    flat: Dict[str, object] = {}
    for section, obj in (("dit", dit), ("enc", enc), ("train", train)):
        for field in dataclasses.fields(obj):
            flat[f"{section}.{field.name}"] = getattr(obj, field.name)
    return flat


def flat_to_configs(flat: Dict[str, object]
                    ) -> Tuple[DiTConfig, EncoderConfig, TrainConfig]:
    built = []
    for section, cls in SECTIONS.items():
        kwargs = {}
        for field in dataclasses.fields(cls):
            key = f"{section}.{field.name}"
            if key in flat:
                kwargs[field.name] = flat[key]
        built.append(cls(**kwargs))
    return tuple(built)
