"""Flat dotted-key configuration files.

The on-disk format is one ``dotted.key = value`` pair per line, with
``#`` comments and blank lines ignored.  Values are typed by shape:
``true``/``false``, integers (underscores allowed), floats, quoted
strings, bare strings.  Shipped profiles and benchmark presets use this
format, and the command line accepts the same files as overrides.
"""

from __future__ import annotations

from typing import Any, Dict, Iterable, Optional


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, lineno: int):
    if raw == "":
        raise ConfigError(f"line {lineno}: empty value")
    if raw == "true":
        return True
    if raw == "false":
        return False
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    try:
        return int(raw.replace("_", ""))
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config(text: str) -> Dict[str, Any]:
    """Parse config text into a flat {dotted.key: value} mapping."""
    out: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(raw.strip(), lineno)
    return out


def load_config(path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    value = str(value)
    if value != value.strip() or "=" in value or value.startswith("#"):
        return f'"{value}"'
    return value


def dump_config(mapping: Dict[str, Any], header: Optional[str] = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(f"{k} = {_format_value(v)}" for k, v in sorted(mapping.items()))
    return "\n".join(lines) + "\n"


def subsection(mapping: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    """Keys under ``prefix.``, with the prefix stripped."""
    dot = prefix + "."
    return {k[len(dot):]: v for k, v in mapping.items() if k.startswith(dot)}


def require(mapping: Dict[str, Any], key: str):
    try:
        return mapping[key]
    except KeyError:
        raise ConfigError(f"missing required key {key!r}") from None


def merged(base: Dict[str, Any], *overrides: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for layer in overrides:
        out.update(layer)
    return out
