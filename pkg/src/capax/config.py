"""Flat ``key = value`` configuration files with ``[section]`` headers.

Keys before the first header are global (``seed``, ``threads``, ``out``,
``suite``, ``experiments``).  Every section configures one experiment; the
section name is the output stem and its part before the first ``.`` names
the experiment kind, so ``[gateaux.biactive]`` runs ``gateaux``.  Lines
starting with ``#`` or ``;`` are comments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

SECTION_RE = re.compile(r"^\[\s*([A-Za-z_][\w.\-]*)\s*\]$")
KEY_RE = re.compile(r"^[A-Za-z_]\w*$")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Entry:
    value: str
    line: int


@dataclass
class Section:
    name: str
    line: int
    entries: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.name.split(".", 1)[0]


@dataclass
class RawConfig:
    globals: dict
    sections: list
    text: str


def parse_config(text: str) -> RawConfig:
    glob: dict = {}
    sections: list = []
    current = glob
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = SECTION_RE.match(line)
        if m:
            name = m.group(1)
            if name in seen:
                raise ConfigError(f"duplicate section [{name}]", lineno)
            seen.add(name)
            sections.append(Section(name, lineno))
            current = sections[-1].entries
            continue
        if line.startswith("["):
            raise ConfigError(f"malformed section header {line!r}", lineno)
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not KEY_RE.match(key):
            raise ConfigError(f"malformed key {key!r}", lineno)
        if key in current:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        current[key] = Entry(value, lineno)
    return RawConfig(glob, sections, text)


# --- typed values ---

def _split(text):
    return [t for t in re.split(r"[\s,]+", text.strip()) if t]


def to_int(text):
    return int(text)


def to_float(text):
    value = float(text)
    if value != value:
        raise ValueError("nan is not allowed")
    return value


def to_bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def to_floats(text):
    return [to_float(t) for t in _split(text)]


def to_ints(text):
    return [int(t) for t in _split(text)]


def to_words(text):
    return _split(text)


def choice(*options):
    def convert(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    convert.__name__ = "choice"
    return convert


def to_grid(text):
    """``interval N``, ``square N`` or ``rect NX NY [EX EY]``; returns a :class:`Grid`."""
    from .mesh import Grid

    parts = _split(text)
    if not parts:
        raise ValueError("empty grid spec")
    kind, args = parts[0], parts[1:]
    if kind == "interval" and len(args) in (1, 2):
        return Grid.interval(int(args[0]), float(args[1]) if len(args) == 2 else 1.0)
    if kind == "square" and len(args) in (1, 2):
        return Grid.square(int(args[0]), float(args[1]) if len(args) == 2 else 1.0)
    if kind == "rect" and len(args) in (2, 4):
        extent = (float(args[2]), float(args[3])) if len(args) == 4 else (1.0, 1.0)
        return Grid(extent, (int(args[0]), int(args[1])))
    raise ValueError(f"bad grid spec {text!r}")


def convert_entries(entries: dict, schema: dict, where: str) -> dict:
    """Typed values for ``entries`` using ``schema = {key: (converter, default_text)}``.

    Defaults are given as text and go through the same converter; a default
    of ``None`` stays ``None``.
    """
    out = {}
    for key, entry in entries.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in {where}", entry.line)
        converter, _ = schema[key]
        try:
            out[key] = converter(entry.value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", entry.line) from None
    for key, (converter, default) in schema.items():
        if key not in out:
            out[key] = None if default is None else converter(default)
    return out
