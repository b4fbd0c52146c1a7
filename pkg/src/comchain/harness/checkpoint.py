"""Binary checkpoint format.

Layout (little endian)::

    b"COMC"  u32 version
    u32 config_len, config JSON bytes (UTF-8); a u32 length is ample for a config echo
    u64 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u64 dims[rank], f32 data
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..modelzoo import ConfigError, ModelConfig, param_shapes

MAGIC = b"COMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class SchemaError(CheckpointError):
    pass


def encode(params: dict[str, np.ndarray], config: ModelConfig) -> bytes:
    shapes = param_shapes(config)
    for name, arr in params.items():
        if name not in shapes:
            raise SchemaError(f"tensor {name!r} is not part of config {config.name!r}")
        if tuple(arr.shape) != shapes[name]:
            raise SchemaError(f"tensor {name!r}: shape {arr.shape} != {shapes[name]}")
    missing = [n for n in shapes if n not in params]
    if missing:
        raise SchemaError(f"missing tensors: {missing[:5]}")
    buf = io.BytesIO()
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", len(shapes)))
    for name in shapes:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(blob: bytes, path="<bytes>", config: ModelConfig | None = None
           ) -> tuple[dict[str, np.ndarray], ModelConfig]:
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        stored = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError, KeyError) as e:
        raise CheckpointError(f"{path}: bad config header: {e}") from e
    target = config or stored
    try:
        shapes = param_shapes(target)
    except ConfigError as e:
        raise SchemaError(str(e)) from e
    (count,) = r.unpack("<Q")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name not in shapes:
            raise SchemaError(f"{path}: unknown tensor {name!r} for config {target.name!r}")
        if tuple(dims) != shapes[name]:
            raise SchemaError(f"{path}: tensor {name!r} has shape {tuple(dims)}, "
                              f"config {target.name!r} expects {shapes[name]}")
        params[name] = data
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    missing = [n for n in shapes if n not in params]
    if missing:
        raise SchemaError(f"{path}: missing tensors {missing[:5]}")
    return params, target


def save_checkpoint(params: dict[str, np.ndarray], config: ModelConfig, path) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    path = Path(path)
    blob = encode(params, config)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, config: ModelConfig | None = None
                    ) -> tuple[dict[str, np.ndarray], ModelConfig]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return decode(blob, path, config)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
