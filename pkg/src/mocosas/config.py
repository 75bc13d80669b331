"""Structured config files: YAML or JSON mapped onto the package's config dataclasses."""

import dataclasses
import typing
from typing import Any, Dict

import yaml


class ConfigError(ValueError):
    pass


def load_file(path) -> Dict[str, Any]:
    """Parse a YAML (or JSON, which YAML accepts) mapping from ``path``."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def from_dict(cls, data: Dict[str, Any] = None):
    """Build dataclass ``cls`` from a mapping, recursing into nested dataclass fields.

    Unknown keys are rejected so that typos do not silently fall back to defaults.
    """
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints.get(key)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = from_dict(hint, value)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def to_dict(obj) -> Dict[str, Any]:
    """Plain-JSON form of a config dataclass (tuples become lists)."""

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    return clean(dataclasses.asdict(obj))
