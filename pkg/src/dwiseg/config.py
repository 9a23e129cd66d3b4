"""Plain-text ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored; an inline ``#`` starts
a comment. Keys are case-insensitive. Unknown keys are an error so typos do
not pass silently.
"""

from __future__ import annotations

from pathlib import Path

from .errors import SpecError


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if not sep or not key:
            raise SpecError(f"{source}:{n}: expected 'key = value', got {line!r}")
        if key in out:
            raise SpecError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def as_list(value: str, cast=str) -> list:
    items = [v.strip() for v in value.split(",") if v.strip()]
    try:
        return [cast(v) for v in items]
    except ValueError as exc:
        raise SpecError(f"bad list value {value!r}: {exc}") from exc


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"not a boolean: {value!r}")


def typed(raw: dict[str, str], schema: dict, source: str = "<config>") -> dict:
    """Convert raw strings with ``schema[key] = (cast, default)``."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise SpecError(f"{source}: unknown keys {unknown}; known: {sorted(schema)}")
    out = {}
    for key, (cast, default) in schema.items():
        if key not in raw:
            out[key] = default
            continue
        try:
            out[key] = cast(raw[key])
        except (ValueError, TypeError) as exc:
            raise SpecError(f"{source}: bad value for {key!r}: {raw[key]!r} ({exc})") from exc
    return out
