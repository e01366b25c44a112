"""Flat ``key = value`` experiment configs with typed dataclass binding.

Files hold one dotted key per line; ``#`` starts a comment. Values are
coerced from the target dataclass's field annotations, so a config can
only set fields that actually exist. ``snapshot_text`` emits the merged
mapping in sorted order, and parsing its output reproduces the mapping.
"""

from dataclasses import fields, is_dataclass
from pathlib import Path
import types
import typing

__all__ = [
    "KVError",
    "parse_kv_text",
    "load_kv",
    "parse_override",
    "coerce",
    "format_value",
    "dataclass_updates",
    "flatten_dataclass",
    "snapshot_text",
    "write_snapshot",
]


class KVError(ValueError):
    """Malformed config text, unknown key, or uncoercible value."""


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise KVError(f"{source}:{lineno}: empty key")
        if key in mapping:
            raise KVError(f"{source}:{lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def load_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise KVError(f"cannot read config {path}: {err}") from err
    return parse_kv_text(text, source=str(path))


def parse_override(pair: str) -> tuple[str, str]:
    """One ``key=value`` command-line override."""
    if "=" not in pair:
        raise KVError(f"override must look like key=value, got {pair!r}")
    key, _, value = pair.partition("=")
    key = key.strip()
    if not key:
        raise KVError(f"override has an empty key: {pair!r}")
    return key, value.strip()


_BOOL_WORDS = {
    "true": True, "1": True, "yes": True,
    "false": False, "0": False, "no": False,
}


def _coerce_scalar(raw: str, typ, key: str):
    if typ is bool:
        word = raw.lower()
        if word not in _BOOL_WORDS:
            raise KVError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise KVError(f"{key}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise KVError(f"{key}: expected a number, got {raw!r}") from None
    if typ is str:
        return raw
    raise KVError(f"{key}: unsupported config field type {typ!r}")


def coerce(raw: str, typ, key: str = "value"):
    """Parse raw text into the annotated field type.

    Supports bool/int/float/str, Optional variants (``none`` maps to
    None), and homogeneous tuples written as comma-separated items.
    """
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if len(args) != 1:
            raise KVError(f"{key}: ambiguous union type {typ!r}")
        if raw.lower() in ("none", "null", ""):
            return None
        return coerce(raw, args[0], key)
    if origin is tuple:
        args = typing.get_args(typ)
        item_type = args[0] if args else str
        if not raw:
            return ()
        return tuple(
            _coerce_scalar(part.strip(), item_type, key)
            for part in raw.split(",")
        )
    return _coerce_scalar(raw, typ, key)


def format_value(value) -> str:
    """Canonical text form; round-trips through ``coerce``."""
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def dataclass_updates(cls, mapping: dict[str, str], prefix: str) -> dict:
    """Typed field updates for keys under ``prefix.`` in the mapping.

    Unknown field names under the prefix are an error; keys outside the
    prefix are ignored.
    """
    if not is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    updates: dict = {}
    dot = prefix + "."
    for key, raw in mapping.items():
        if not key.startswith(dot):
            continue
        name = key[len(dot):]
        if name not in known:
            raise KVError(f"unknown key {key!r} (no field {name!r} on {cls.__name__})")
        updates[name] = coerce(raw, hints[name], key)
    return updates


def flatten_dataclass(instance, prefix: str, skip: tuple[str, ...] = ()) -> dict[str, str]:
    """Dotted-key text mapping of an instance's fields."""
    out: dict[str, str] = {}
    for f in fields(instance):
        if f.name in skip:
            continue
        out[f"{prefix}.{f.name}"] = format_value(getattr(instance, f.name))
    return out


def snapshot_text(mapping: dict[str, str]) -> str:
    lines = [f"{key} = {mapping[key]}" for key in sorted(mapping)]
    return "\n".join(lines) + "\n"


def write_snapshot(path, mapping: dict[str, str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(snapshot_text(mapping), encoding="utf-8")
    tmp.replace(path)
