"""Dataclass config plumbing: dict round-trips, JSON files, override layering.

Every module defines its own config dataclass; this module only knows how to
move them in and out of plain dicts so the CLI can layer
defaults < config file < command-line flags.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    """Bad key, bad type, or unreadable config file."""


def to_dict(cfg: Any) -> dict:
    """Recursively convert a config dataclass to a JSON-ready dict."""
    if dataclasses.is_dataclass(cfg) and not isinstance(cfg, type):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [to_dict(v) for v in cfg]
    if isinstance(cfg, dict):
        return {k: to_dict(v) for k, v in cfg.items()}
    if hasattr(cfg, "item") and not isinstance(cfg, (str, bytes)):
        # numpy scalar
        return cfg.item()
    return cfg


def from_dict(cls: Type[T], data: dict) -> T:
    """Build a config dataclass from a dict, recursing into dataclass fields.

    Unknown keys are an error: a typo in a config file should fail loudly,
    not silently fall back to a default.
    """
    if not dataclasses.is_dataclass(cls):
        raise ConfigError(f"{cls!r} is not a dataclass")
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    field_by_name = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(field_by_name)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = field_by_name[name].type
        target = _resolve_type(cls, ftype)
        if dataclasses.is_dataclass(target) and isinstance(value, dict):
            kwargs[name] = from_dict(target, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _resolve_type(cls: type, ftype: Any) -> Any:
    # Field types are strings under `from __future__ import annotations`.
    if isinstance(ftype, str):
        import sys

        mod = sys.modules.get(cls.__module__)
        ns = vars(mod) if mod else {}
        try:
            return eval(ftype, ns)  # noqa: S307 - trusted module-level names only
        except Exception:
            return None
    return ftype


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; `override` wins, nested dicts merge key-wise."""
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def load_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def dump_json(obj: Any, path: str | Path) -> None:
    """Write canonically formatted JSON (sorted keys, stable floats)."""
    with open(path, "w") as fh:
        json.dump(to_dict(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def layered(cls: Type[T], file_data: dict | None = None, overrides: dict | None = None) -> T:
    """defaults < file < explicit overrides, returned as a dataclass."""
    base = to_dict(cls())
    if file_data:
        base = merge(base, file_data)
    if overrides:
        base = merge(base, overrides)
    return from_dict(cls, base)
