"""Binary checkpoint container.

Layout (little-endian)::

    b"MACK" | u32 version | str config_hash | str phase | u32 n_sections
    section*: str name | u8 kind | payload
        kind 0 (array): u8 dtype code | u8 ndim | u32 dims[ndim] | u64 nbytes | raw bytes
        kind 1 (json):  u64 nbytes | utf-8 JSON
    u32 CRC32 of everything before it

where ``str`` is a u16 byte length followed by UTF-8 bytes.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metadapt.errors import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigMismatchError,
)

MAGIC = b"MACK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u8"), 4: np.dtype("u1"), 5: np.dtype("<i4")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


@dataclass
class Checkpoint:
    phase: str
    config_hash: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)
    version: int = VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.arrays.items() if k.startswith(p)}


def _put_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode()
    buf.write(struct.pack("<H", len(b)))
    buf.write(b)


def encode(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ck.version))
    _put_str(buf, ck.config_hash)
    _put_str(buf, ck.phase)
    buf.write(struct.pack("<I", len(ck.arrays) + len(ck.meta)))
    for name in sorted(ck.arrays):
        arr = np.asarray(ck.arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _CODES:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        _put_str(buf, name)
        buf.write(struct.pack("<BBB", 0, _CODES[np.dtype(dt)], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    for name in sorted(ck.meta):
        data = json.dumps(ck.meta[name], sort_keys=True).encode()
        _put_str(buf, name)
        buf.write(struct.pack("<BQ", 1, len(data)))
        buf.write(data)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointIntegrityError("checkpoint is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(raw) < 12:
        raise CheckpointIntegrityError("checkpoint is truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointIntegrityError("checkpoint checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(8)
    ck = Checkpoint(phase="", config_hash=r.string(), version=version)
    ck.phase = r.string()
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.string()
        (kind,) = r.unpack("<B")
        if kind == 0:
            code, ndim = r.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
            shape = r.unpack(f"<{ndim}I")
            (nbytes,) = r.unpack("<Q")
            dt = _DTYPES[code]
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
                raise CheckpointIntegrityError(f"{name}: byte count does not match its shape header")
            ck.arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
        elif kind == 1:
            (nbytes,) = r.unpack("<Q")
            ck.meta[name] = json.loads(r.take(nbytes).decode())
        else:
            raise CheckpointFormatError(f"{name}: unknown section kind {kind}")
    if r.pos != len(body):
        raise CheckpointIntegrityError("trailing bytes after the last section")
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    ck = decode(Path(path).read_bytes())
    if expected_hash is not None and ck.config_hash != expected_hash and not force:
        raise ConfigMismatchError(
            f"checkpoint config hash {ck.config_hash[:12]} differs from the current config {expected_hash[:12]}; use --force to load anyway"
        )
    return ck
