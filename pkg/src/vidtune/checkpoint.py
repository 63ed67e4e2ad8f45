"""Versioned binary container for named fp64 tensors plus text metadata.

Layout (all integers little-endian)::

    magic            8 bytes  b"VIDTCKPT"
    version          u32
    metadata length  u64, then that many bytes of UTF-8 "key=value" lines
    tensor count     u32
    index entries    per tensor: u16 name length, name, u16 tag length, tag,
                     u8 ndim, ndim x u64 dims, u64 payload offset
    payload length   u64, then the raw little-endian fp64 data
    crc32            u32 over every preceding byte

Metadata values are JSON so nested config survives the text form.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

MAGIC = b"VIDTCKPT"
FORMAT_VERSION = 1


@dataclass
class TensorFile:
    """Named tensors (each with a text tag) and a key-value metadata map."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode(tf: TensorFile) -> bytes:
    meta_lines = []
    for key in sorted(tf.meta):
        if "=" in key or "\n" in key:
            raise CheckpointError(f"metadata key {key!r} may not contain '=' or newlines")
        meta_lines.append(f"{key}={json.dumps(tf.meta[key], sort_keys=True)}")
    meta = "\n".join(meta_lines).encode("utf-8")

    index = bytearray()
    payload = bytearray()
    names = list(tf.tensors)
    for name in names:
        arr = np.asarray(tf.tensors[name], dtype="<f8", order="C")
        nb, tb = name.encode("utf-8"), str(tf.tags.get(name, "")).encode("utf-8")
        index += struct.pack("<H", len(nb)) + nb + struct.pack("<H", len(tb)) + tb
        index += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        index += struct.pack("<Q", len(payload))
        payload += arr.tobytes()

    body = bytearray(MAGIC)
    body += struct.pack("<I", tf.version)
    body += struct.pack("<Q", len(meta)) + meta
    body += struct.pack("<I", len(names)) + index
    body += struct.pack("<Q", len(payload)) + payload
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return bytes(body)


class _Reader:
    def __init__(self, buf: bytes, limit: int):
        self.buf, self.pos, self.limit = buf, 0, limit

    def take(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise CheckpointTruncatedError(
                f"file ends at byte {self.limit} but {self.pos + n} bytes are required"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> TensorFile:
    if len(buf) < len(MAGIC) + 4:
        raise CheckpointTruncatedError(f"only {len(buf)} bytes, header incomplete")
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a vidtune tensor file (bad magic bytes)")
    (version,) = struct.unpack("<I", buf[len(MAGIC) : len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, this build reads {FORMAT_VERSION}")

    # structure first (a short file is reported as truncated), then the checksum
    r = _Reader(buf, len(buf) - 4 if len(buf) >= 4 else 0)
    r.take(len(MAGIC) + 4)
    (meta_len,) = r.unpack("<Q")
    meta_raw = r.take(meta_len)
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode("utf-8")
        (tl,) = r.unpack("<H")
        tag = r.take(tl).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, tag, tuple(int(s) for s in shape), offset))
    (payload_len,) = r.unpack("<Q")
    payload_start = r.pos
    r.take(payload_len)
    if r.pos + 4 != len(buf):
        if r.pos + 4 > len(buf):
            raise CheckpointTruncatedError("checksum missing")
        raise CheckpointError(f"{len(buf) - r.pos - 4} unexpected trailing bytes")
    (stored,) = struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointChecksumError(f"CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}")

    tf = TensorFile(version=version)
    for line in meta_raw.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        tf.meta[key] = json.loads(value)
    for name, tag, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > payload_len:
            raise CheckpointError(f"tensor {name} overruns the payload")
        start = payload_start + offset
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape)
        tf.tensors[name] = arr.astype(np.float64, copy=True)
        tf.tags[name] = tag
    return tf


def save_tensor_file(tf: TensorFile, path) -> Path:
    path = Path(path)
    data = encode(tf)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise CheckpointError(f"cannot write {path}: {e}") from e
    return path


def load_tensor_file(path) -> TensorFile:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return decode(buf)
