"""Small file helpers: atomic writes and the key = value config format.

Every artifact file in this package is written through :func:`atomic_write`
(write to a temp file in the target directory, then rename), so an
interrupted run never leaves a truncated file behind.
"""

from __future__ import annotations

import json
import os
import tempfile

from .errors import ParseError


def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | os.PathLike, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def parse_kv_text(text: str, path: str = "") -> dict[str, str]:
    """Parse the flat ``key = value`` config format (``#`` starts a comment)."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", path=path, line=lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError("empty key", path=path, line=lineno)
        out[key] = value.strip()
    return out


def read_kv_file(path: str | os.PathLike) -> dict[str, str]:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), path=path)


def format_kv(values: dict) -> str:
    lines = [f"{key} = {values[key]}" for key in values]
    return "\n".join(lines) + "\n"
