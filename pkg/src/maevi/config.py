"""Plain-text ``key = value`` configuration files and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    pass


def parse_lines(text, source="<config>"):
    """Yield ``(key, value, lineno)``; ``#`` starts a comment, blank lines are skipped."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        yield key, value.strip(), lineno


def read_pairs(path):
    with open(path) as fh:
        return list(parse_lines(fh.read(), source=path))


def parse_overrides(items):
    pairs = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip(), 0))
    return pairs


def _coerce(value, kind, key):
    origin = typing.get_origin(kind)
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return value
        if kind is tuple or origin is tuple:
            args = typing.get_args(kind)
            elem = args[0] if args else float
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(_coerce(p, elem, key) for p in parts)
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for key {key!r}") from None
    raise ConfigError(f"key {key!r} cannot be set from text")


def apply_pairs(obj, pairs, source="config"):
    """Return a copy of dataclass ``obj`` with ``pairs`` applied; unknown keys are rejected."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, value, lineno in pairs:
        if key not in names:
            where = f"{source}:{lineno}" if lineno else source
            raise ConfigError(f"{where}: unknown key {key!r}")
        updates[key] = _coerce(value, hints[key], key)
    return dataclasses.replace(obj, **updates)


def to_text(obj):
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
