"""Flat ``section.key=value`` text <-> nested dataclasses."""

from __future__ import annotations

import dataclasses
import typing


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.message = message
        self.line = line
        self.field = field


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def flatten(obj, prefix: str = "") -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            items.extend(flatten(value, key + "."))
        else:
            items.append((key, _fmt(value)))
    return items


def dumps(obj) -> str:
    return "".join(f"{k}={v}\n" for k, v in flatten(obj))


def parse_lines(text: str) -> list[tuple[int, str, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=lineno)
        out.append((lineno, key, value))
    return out


def _convert(tp, text: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if text == "":
            return None
        return _convert(inner[0], text)
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if origin in (list, tuple):
        elem = args[0] if args else str
        vals = [_convert(elem, t.strip()) for t in text.split(",") if t.strip()]
        return tuple(vals) if origin is tuple else vals
    raise TypeError(f"unsupported config type {tp}")


def apply(obj, items: list[tuple[int | None, str, str]]):
    """Return a copy of dataclass ``obj`` with dotted keys overridden.

    Nested dataclasses are rebuilt so their ``__post_init__`` validation runs.
    """
    grouped: dict[str, list] = {}
    direct: dict[str, tuple] = {}
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for lineno, key, value in items:
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError("unknown key", line=lineno, field=key)
        if rest:
            if not dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError("not a section", line=lineno, field=key)
            grouped.setdefault(head, []).append((lineno, rest, value))
        else:
            if dataclasses.is_dataclass(getattr(obj, head)):
                raise ConfigError("section needs a sub-key", line=lineno, field=key)
            direct[head] = (lineno, value)
    changes = {}
    for name, (lineno, value) in direct.items():
        try:
            changes[name] = _convert(hints[name], value)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e), line=lineno, field=name) from None
    for name, sub in grouped.items():
        try:
            changes[name] = apply(getattr(obj, name), sub)
        except ConfigError as e:
            raise ConfigError(e.message, line=e.line,
                              field=f"{name}.{e.field}" if e.field else name) from None
    try:
        return dataclasses.replace(obj, **changes)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        line = items[0][0] if items else None
        raise ConfigError(str(e), line=line) from None


def loads(obj, text: str):
    return apply(obj, parse_lines(text))
