"""Plain-text ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are coerced to the type
of the matching dataclass field; unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import MISSING, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


def _coerce(value: str, typ: str, key: str):
    typ = typ.replace(" ", "")
    try:
        if typ == "bool":
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {typ}") from None


def build(cls, values: dict[str, str], required: tuple[str, ...] = (), overrides: dict | None = None):
    """Instantiate dataclass ``cls`` from string values.

    Keys listed in ``required`` must be present even though the dataclass
    has defaults for them.
    """
    spec = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(spec))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    for key in required:
        if key not in values and key not in (overrides or {}):
            raise ConfigError(f"missing config key {key!r} (no default)")
    kwargs = {}
    for name, f in spec.items():
        if name in values:
            kwargs[name] = _coerce(values[name], str(f.type), name)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing config key {name!r} (no default)")
    kwargs.update(overrides or {})
    obj = cls(**kwargs)
    try:
        obj.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return obj


def dump(obj) -> str:
    lines = []
    for f in fields(obj):
        lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
