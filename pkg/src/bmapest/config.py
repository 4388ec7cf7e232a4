"""Plain ``key = value`` configuration files.

Keys are dotted (``csf.t1``, ``optim.lr``, ``loss.domain``); blank lines and
``#`` comments are ignored. Values stay strings here; each consumer converts
the keys it owns and rejects the rest.
"""

from __future__ import annotations

from pathlib import Path

from bmapest.errors import FormatError


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def section(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    """Keys under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
