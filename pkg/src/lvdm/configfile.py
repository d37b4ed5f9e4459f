"""Flat text configuration: one `section.field = value` assignment per line.

Sections map onto the config dataclasses (codec, backbone, schedule, train,
data, superres); unknown keys fail fast with the full list of valid ones.
Values use Python literal syntax, with bare words read as strings.
"""

from __future__ import annotations

import ast
import inspect


def _schema():
    from .backbone import DenoiserConfig
    from .codec import CodecConfig
    from .data import ToyDatasetSpec
    from .diffusion import make_schedule
    from .training import TrainConfig

    schema = {
        "codec": set(CodecConfig.__dataclass_fields__),
        "backbone": set(DenoiserConfig.__dataclass_fields__),
        "train": set(TrainConfig.__dataclass_fields__),
        "data": set(ToyDatasetSpec.__dataclass_fields__),
        "schedule": set(inspect.signature(make_schedule).parameters),
        "superres": {"scale", "t_max_noise"},
    }
    return schema


def valid_keys() -> list[str]:
    return sorted(f"{sec}.{f}" for sec, fields in _schema().items() for f in fields)


def parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict:
    """Returns {section: {field: value}}; raises on malformed or unknown keys."""
    schema = _schema()
    out: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.field = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ValueError(f"line {lineno}: key must be section.field, got {key!r}")
        section, field = key.split(".")
        if section not in schema or field not in schema[section]:
            raise ValueError(
                f"line {lineno}: unknown config key {key!r}; valid keys:\n  "
                + "\n  ".join(valid_keys())
            )
        out.setdefault(section, {})[field] = parse_value(value)
    return out


def load_config(path: str) -> dict:
    with open(path) as f:
        return parse_config_text(f.read())


def apply_overrides(config: dict, overrides) -> dict:
    """Merge 'section.field=value' strings (CLI flags) over a parsed config."""
    schema = _schema()
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be section.field=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ValueError(f"override key must be section.field, got {key!r}")
        section, field = key.split(".")
        if section not in schema or field not in schema[section]:
            raise ValueError(
                f"unknown config key {key!r}; valid keys:\n  " + "\n  ".join(valid_keys())
            )
        config.setdefault(section, {})[field] = parse_value(value)
    return config
