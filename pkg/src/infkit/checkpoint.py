"""
Binary checkpoints and their JSON mirror.

Binary layout (all integers little-endian)::

    b"GIFC"                       magic
    uint32                        format version
    uint32                        tensor count
    per tensor:
        uint32 + bytes            name length, UTF-8 name
        uint32                    rank
        uint64 * rank             dims
        float64 * prod(dims)      row-major values, little-endian
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, RefusedError
from .model import LayerSlot, ModelSpec, ParamVector

MAGIC = b"GIFC"
VERSION = 1


def _atomic_write(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(params: ParamVector) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params.layer_map))]
    for slot in params.layer_map:
        name = slot.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", len(slot.shape)))
        parts.append(struct.pack(f"<{len(slot.shape)}Q", *slot.shape))
        parts.append(params.values[slot.offset:slot.stop].astype("<f8").tobytes())
    return b"".join(parts)


def decode(payload: bytes) -> ParamVector:
    if payload[:4] != MAGIC:
        raise ConfigError("not a GIFC checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(payload):
            raise ConfigError("truncated checkpoint")
        out = struct.unpack_from(fmt, payload, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise RefusedError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    slots, chunks = [], []
    offset = 0
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(take(f"<{name_len}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        shape = tuple(int(d) for d in take(f"<{rank}Q")) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        if pos + 8 * size > len(payload):
            raise ConfigError("truncated checkpoint")
        chunks.append(np.frombuffer(payload, dtype="<f8", count=size, offset=pos).astype(np.float64))
        pos += 8 * size
        slots.append(LayerSlot(name, offset, shape))
        offset += size
    if pos != len(payload):
        raise ConfigError("trailing bytes after checkpoint tensors")
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, tuple(slots))


def save_checkpoint(path, params: ParamVector):
    _atomic_write(Path(path), encode(params))


def load_checkpoint(path, spec: ModelSpec | None = None) -> ParamVector:
    """Read a binary checkpoint; with ``spec`` given, check the layout matches."""
    params = decode(Path(path).read_bytes())
    if spec is not None and params.layer_map != spec.layer_map():
        raise RefusedError("checkpoint layout does not match the configured model")
    return params


def to_json(params: ParamVector, spec: ModelSpec | None = None) -> dict:
    doc = {
        "format": "GIFC",
        "version": VERSION,
        "tensors": [
            {"name": s.name, "shape": list(s.shape), "values": params.values[s.offset:s.stop].tolist()}
            for s in params.layer_map
        ],
    }
    if spec is not None:
        doc["model"] = spec.to_dict()
    return doc


def from_json(doc: dict) -> ParamVector:
    if doc.get("format") != "GIFC":
        raise ConfigError("not a GIFC JSON export")
    if doc.get("version") != VERSION:
        raise RefusedError(f"JSON export version {doc.get('version')} is not supported")
    slots, chunks, offset = [], [], 0
    for t in doc["tensors"]:
        shape = tuple(int(d) for d in t["shape"])
        slots.append(LayerSlot(t["name"], offset, shape))
        chunks.append(np.asarray(t["values"], dtype=np.float64))
        offset += int(np.prod(shape))
    return ParamVector(np.concatenate(chunks), tuple(slots))


def export_json(path, params: ParamVector, spec: ModelSpec | None = None):
    _atomic_write(Path(path), json.dumps(to_json(params, spec), indent=1).encode("utf-8"))
