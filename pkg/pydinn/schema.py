"""Module implementing strict conversion between config dataclasses and JSON documents."""

import dataclasses
import typing
from enum import Enum
from typing import Any, Dict, Mapping, Type, TypeVar

import numpy as np

from pydinn.errors import ConfigError

T = TypeVar("T")


def to_plain(value: Any) -> Any:
    """JSON-compatible form of a config value: dataclasses become dicts, enums their values, tuples lists."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {field.name: to_plain(getattr(value, field.name)) for field in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [to_plain(item) for item in value]
    if isinstance(value, dict):
        return {str(key): to_plain(item) for key, item in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def _convert(annotation: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        annotation = next(arg for arg in args if arg is not type(None))
        origin, args = typing.get_origin(annotation), typing.get_args(annotation)
    if isinstance(annotation, type) and dataclasses.is_dataclass(annotation):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path} must be an object, got {value!r}.")
        return from_plain(annotation, value, f"{path}.")
    if isinstance(annotation, type) and issubclass(annotation, Enum):
        try:
            return annotation(value)
        except ValueError:
            raise ConfigError(
                f"{path} has unsupported value {value!r}, possible values are: "
                f"{', '.join(str(member.value) for member in annotation)}"
            ) from ValueError
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}.")
        item_type = args[0] if args else Any
        items = [_convert(item_type, item, f"{path}[{index}]") for index, item in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if annotation is bool and not isinstance(value, bool):
        raise ConfigError(f"{path} must be true or false, got {value!r}.")
    if annotation is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path} must be an integer, got {value!r}.")
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}.")
        return float(value)
    if annotation is str and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}.")
    return value


def from_plain(cls: Type[T], document: Mapping[str, Any], path: str = "") -> T:
    """Builds a config dataclass from a JSON object; missing keys take their defaults.

    :raises ConfigError: naming the key path of an unknown key or an ill-typed value.
    """
    hints = typing.get_type_hints(cls)
    names = {field.name for field in dataclasses.fields(cls) if field.init}  # type: ignore[arg-type]
    unknown = sorted(key for key in document if key not in names)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(f'{path}{key}' for key in unknown)}")
    kwargs: Dict[str, Any] = {
        key: _convert(hints[key], value, f"{path}{key}") for key, value in document.items()
    }
    return cls(**kwargs)
