"""Versioned binary checkpoint container.

Layout: 4-byte magic, uint32 format version, uint32 header length, a UTF-8
JSON header (config key-value pairs, free-form extra state, and the tensor
manifest), then the named tensors in manifest order as row-major
little-endian 32-bit floats.  Loading reads and validates everything before
returning, so a truncated or corrupt file never yields partial state.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import FormatError
from .fileio import atomic_write

MODEL_MAGIC = b"CODM"
DURATION_MAGIC = b"CODD"
FORMAT_VERSION = 1


def write_container(path, magic: bytes, config: dict, tensors: dict, extra: dict | None = None) -> None:
    if len(magic) != 4:
        raise FormatError("magic must be exactly 4 bytes")
    names = sorted(tensors)
    manifest = []
    payload = io.BytesIO()
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payload.write(arr.tobytes())
    header = json.dumps(
        {"config": config, "extra": extra or {}, "tensors": manifest},
        sort_keys=True,
    ).encode("utf-8")
    blob = io.BytesIO()
    blob.write(magic)
    blob.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    blob.write(header)
    blob.write(payload.getvalue())
    atomic_write(path, blob.getvalue())


def read_container(path, magic: bytes) -> tuple[dict, dict, dict]:
    """Returns (config, tensors, extra); raises FormatError on any defect."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} not supported (want {FORMAT_VERSION})")
    if len(data) < 12 + header_len:
        raise FormatError(f"{path}: truncated header block")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    offset = 12 + header_len
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated tensor {entry['name']!r}")
        flat = np.frombuffer(data[offset : offset + nbytes], dtype="<f4")
        tensors[entry["name"]] = flat.reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header.get("config", {}), tensors, header.get("extra", {})


def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def rng_state_from_json(blob: dict) -> np.random.Generator:
    if blob["bit_generator"] != "PCG64":
        raise FormatError(f"unsupported bit generator {blob['bit_generator']!r}")
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(blob["state"]), "inc": int(blob["inc"])},
        "has_uint32": blob["has_uint32"],
        "uinteger": blob["uinteger"],
    }
    return rng
