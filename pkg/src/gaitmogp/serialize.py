"""Flat key-value text documents and atomic file writes.

Model files (mogp-v1, hmm-v1) are self-describing documents of
"key = value" lines. Floats are written with repr, which round-trips
bit-exactly through float(); writing is deterministic so identical
models produce identical bytes.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from .errors import ValidationError


def format_float(x: float) -> str:
    return repr(float(x))


def format_float_list(xs) -> str:
    return ",".join(repr(float(x)) for x in xs)


def format_int_list(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def parse_float_list(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    return [float(part) for part in text.split(",")]


def parse_int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    return [int(part) for part in text.split(",")]


def render_document(items: list[tuple[str, str]]) -> str:
    lines = []
    for key, value in items:
        if "=" in key or "\n" in key or "\n" in value:
            raise ValidationError(f"illegal characters in document entry {key!r}")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_document(text: str, path: str = "<memory>") -> dict[str, str]:
    """Parse a key-value document into a dict; duplicate keys are errors."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValidationError(f"{path}:{lineno}: empty key")
        if key in entries:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def require_key(entries: dict[str, str], key: str, path: str = "<memory>") -> str:
    if key not in entries:
        raise ValidationError(f"{path}: missing required key {key!r}")
    return entries[key]


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_document(path, items: list[tuple[str, str]]) -> None:
    atomic_write_text(path, render_document(items))


def read_document(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"no such file: {path}")
    return parse_document(path.read_text(encoding="utf-8"), path=str(path))
