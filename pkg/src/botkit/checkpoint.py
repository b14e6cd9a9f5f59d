"""Binary checkpoint format.

Layout (all integers little-endian u32 unless noted)::

    b"BOTN" | version | entry count
    per entry: name length | UTF-8 name | dtype code (u8) | rank | extents... | raw values
    metadata length | UTF-8 "key=value" lines
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"BOTN"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _encode_metadata(meta: dict) -> bytes:
    lines = []
    for key, value in meta.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"metadata key/value not representable: {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(raw: bytes) -> dict[str, str]:
    meta = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def write_entries(path, entries: "OrderedDict[str, np.ndarray]", metadata: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    seen = set()
    for name, arr in entries.items():
        if name in seen:
            raise CheckpointError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    meta = _encode_metadata(metadata or {})
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    Path(path).write_bytes(buf.getvalue())


def read_entries(path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, str]]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a BOTN checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5, f"{name} header"))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        values = np.frombuffer(take(nbytes, f"{name} values"), dtype=dt).reshape(shape).copy()
        if name in entries:
            raise CheckpointError(f"duplicate entry name {name!r}")
        entries[name] = values
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta = _decode_metadata(bytes(take(meta_len, "metadata")))
    return entries, meta


def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    """Parameters and BN running statistics, plus the model config and ``metadata``."""
    meta = dict(model.config.to_metadata()) if hasattr(model, "config") else {}
    meta.update(metadata or {})
    write_entries(path, model.state_dict(), meta)


def load_checkpoint(model, path) -> dict[str, str]:
    """Copy checkpoint values into ``model`` in place; returns the metadata."""
    entries, meta = read_entries(path)
    own = model.state_dict()
    for name in own:
        if name not in entries:
            raise CheckpointError(f"checkpoint is missing entry {name!r}")
    for name, arr in entries.items():
        if name not in own:
            raise CheckpointError(f"checkpoint has unexpected entry {name!r}")
        if arr.shape != own[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
        if arr.dtype != own[name].dtype:
            raise CheckpointError(f"{name}: checkpoint dtype {arr.dtype} != model dtype {own[name].dtype}")
    for name, arr in entries.items():
        own[name][...] = arr
    return meta


def load_model(path):
    """Rebuild a BotNet from the config stored in a checkpoint and load its weights."""
    from .botnet import BotNet, BotNet50Config

    _, meta = read_entries(path)
    model = BotNet(BotNet50Config.from_metadata(meta))
    load_checkpoint(model, path)
    return model, meta
