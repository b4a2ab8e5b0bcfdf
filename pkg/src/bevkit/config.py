"""Plain-text ``key=value`` serialization for the config dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}:{_format_value(x)}" for k, x in v.items())
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, default: Any) -> Any:
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_value(text: str, default: Any) -> Any:
    """Parse ``text`` using the type of ``default`` as the template."""
    if isinstance(default, tuple):
        items = [t for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], tuple):
            raise ValueError("nested tuples are not supported in key=value configs")
        template = default[0] if default else 0.0
        return tuple(_parse_scalar(t, template) for t in items)
    if isinstance(default, dict):
        out = {}
        template = next(iter(default.values())) if default else 0.0
        for item in text.split(","):
            if item.strip():
                k, _, v = item.partition(":")
                out[k.strip()] = _parse_scalar(v, template)
        return out
    return _parse_scalar(text, default)


def to_text(cfg: Any, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines.append(to_text(v, prefix=f"{prefix}{f.name}.").rstrip("\n"))
        else:
            lines.append(f"{prefix}{f.name}={_format_value(v)}")
    return "\n".join(lines) + "\n"


def read_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        pairs[key.strip()] = value.strip()
    return pairs


def apply_pairs(cfg: Any, pairs: dict[str, str]) -> Any:
    """Return a copy of ``cfg`` with dotted keys replaced; unknown keys raise."""
    direct: dict[str, Any] = {}
    nested: dict[str, dict[str, str]] = {}
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in pairs.items():
        head, dot, rest = key.partition(".")
        if head not in names:
            raise KeyError(f"unknown config key {key!r} for {type(cfg).__name__}")
        if dot:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = parse_value(value, getattr(cfg, head))
    for head, sub in nested.items():
        direct[head] = apply_pairs(getattr(cfg, head), sub)
    return dataclasses.replace(cfg, **direct)


def from_text(cls_or_cfg: Any, text: str) -> Any:
    base = cls_or_cfg() if isinstance(cls_or_cfg, type) else cls_or_cfg
    return apply_pairs(base, read_pairs(text))


def load(cls_or_cfg: Any, path: str | Path) -> Any:
    return from_text(cls_or_cfg, Path(path).read_text())
