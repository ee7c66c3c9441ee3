# Copyright © 2024 MoPD Lab Contributors.

"""Config-file plumbing shared by the task, teacher and training configs.

Configs are dataclasses. :func:`from_dict` builds one from a parsed JSON
object, rejecting unknown and missing fields with a :class:`ConfigError`
naming the field, and :func:`to_dict` renders it back to plain JSON types.
"""

import dataclasses
import logging
import os
import typing
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar, Union

from mopd.errors import ConfigError
from mopd.serialization import load_json

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_OUTPUT_ROOT = "runs"

# Per-task overrides of the training recipe. Fields given explicitly in a
# config take precedence over the preset.
PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {},
    "imagenet-like": {"top_t": 3},
    "caltech-like": {"top_t": 3},
    "pets-like": {"top_t": 3},
    "cars-like": {"top_t": 3, "beta": 1.0},
    "flowers-like": {"top_t": 3},
    "food101-like": {"alpha": 0.5},
    "aircraft-like": {},
    "sun397-like": {},
    "dtd-like": {"beta": 1.0},
    "eurosat-like": {"alpha": 0.5},
    "ucf101-like": {"alpha": 0.5},
}


def default_output_root() -> Path:
    """The run output root, ``$MOPD_OUTPUT_ROOT`` or ``runs``."""
    return Path(os.environ.get("MOPD_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT))


def env_log_level(default: str = "WARNING") -> str:
    return os.environ.get("MOPD_LOG_LEVEL", default).upper()


def acceptance_enabled() -> bool:
    return os.environ.get("MOPD_ACCEPTANCE", "") not in ("", "0")


def apply_preset(data: Mapping[str, Any]) -> Dict[str, Any]:
    """Merge the named ``preset`` (if any) under the explicit fields."""
    data = dict(data)
    name = data.get("preset")
    if name is None:
        return data
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}, expected one of {sorted(PRESETS)}", field="preset"
        )
    return {**PRESETS[name], **data}


def _coerce(name: str, hint: Any, value: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(name, inner[0], value)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=name)
        inner = args[0] if args else Any
        items = [_coerce(name, inner, v) for v in value]
        return tuple(items) if origin is tuple else items
    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(f"expected one of {list(args)}, got {value!r}", field=name)
        return value
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            choices = [m.value for m in hint]
            raise ConfigError(f"expected one of {choices}, got {value!r}", field=name)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", field=name)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=name)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=name)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=name)
        return value
    return value


def from_dict(
    cls: Type[T],
    data: Mapping[str, Any],
    aliases: Optional[Mapping[str, str]] = None,
) -> T:
    """Build the dataclass ``cls`` from a mapping of field values.

    Args:
        cls: The config dataclass.
        data: Field values, e.g. a parsed JSON object.
        aliases: Alternative spellings accepted for some fields.

    Raises:
        ConfigError: on unknown, missing or ill-typed fields.
    """
    if not isinstance(data, Mapping):
        raise ConfigError(f"expected a JSON object for {cls.__name__}, got {type(data).__name__}")
    aliases = aliases or {}
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown field for {cls.__name__}", field=key)
        if name in kwargs:
            raise ConfigError("field given twice", field=key)
        kwargs[name] = _coerce(key, hints[name], value)
    for name, f in fields.items():
        required = (
            f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        )
        if required and name not in kwargs:
            raise ConfigError("missing required field", field=name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def to_dict(obj: Any) -> Dict[str, Any]:
    """Render a config dataclass as plain JSON types."""

    def plain(value):
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, (list, tuple)):
            return [plain(v) for v in value]
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        return value

    return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def load_config(cls: Type[T], path: Union[str, Path]) -> T:
    """Read a JSON config file into ``cls`` through its ``from_dict``, which
    resolves the class's aliases and presets."""
    data = load_json(path)
    logger.debug("Loaded %s from %s", cls.__name__, path)
    return cls.from_dict(data)
