"""Versioned binary checkpoints for a (config, parameters) pair.

Byte layout (all integers little-endian)::

    offset  size  field
    0       6     magic b"VMDNN\\0"
    6       2     u16 format version (currently 1)
    8       4     u32 length L of the JSON config blob
    12      L     UTF-8 JSON config (sorted keys)
    12+L    8     u64 parameter count N
    20+L    8N    N float64 parameters in canonical order
    20+L+8N 8     u64 CRC-64/XZ of every preceding byte

A file is written to a temporary sibling and renamed into place, so readers
never see a partial checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import VMDNNConfig
from .errors import (CheckpointChecksumError, CheckpointFormatError, CheckpointTruncatedError,
                     CheckpointVersionError)
from .network import ParameterSet

MAGIC = b"VMDNN\0"
FORMAT_VERSION = 1

_POLY = 0xC96C5795D7870F42  # reflected ECMA-182


def _make_table():
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _POLY if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _make_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ (reflected ECMA-182, init and xorout all ones)."""
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def checkpoint_bytes(cfg: VMDNNConfig, theta: ParameterSet) -> bytes:
    blob = cfg.to_json().encode("utf-8")
    flat = np.ascontiguousarray(theta.flat, dtype="<f8")
    body = b"".join([
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<Q", flat.size),
        flat.tobytes(),
    ])
    return body + struct.pack("<Q", crc64(body))


def save_checkpoint(cfg: VMDNNConfig, theta: ParameterSet, path):
    path = Path(path)
    data = checkpoint_bytes(cfg, theta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def parse_checkpoint(data: bytes):
    """Decode checkpoint bytes into ``(cfg, theta)``; raises a specific error per fault."""
    if len(data) < len(MAGIC):
        raise CheckpointTruncatedError("file shorter than the magic header")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a VMDNN checkpoint (bad magic)")
    pos = len(MAGIC)

    def need(n, what):
        if pos + n > len(data):
            raise CheckpointTruncatedError(f"file ends inside {what}")

    need(2, "version field")
    (version,) = struct.unpack_from("<H", data, pos)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    pos += 2
    need(4, "config length")
    (blob_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    need(blob_len, "config blob")
    blob = data[pos:pos + blob_len]
    pos += blob_len
    need(8, "parameter count")
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    need(8 * count, "parameter array")
    flat_at = pos
    pos += 8 * count
    need(8, "checksum")
    (stored,) = struct.unpack_from("<Q", data, pos)
    if pos + 8 != len(data):
        raise CheckpointFormatError("trailing bytes after checksum")
    if crc64(data[:pos]) != stored:
        raise CheckpointChecksumError("checksum mismatch")

    try:
        cfg = VMDNNConfig.from_dict(json.loads(blob.decode("utf-8")))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"unreadable config blob: {exc}") from exc
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=flat_at).astype(np.float64)
    theta = ParameterSet(cfg)
    if len(theta) != count:
        raise CheckpointFormatError(f"config needs {len(theta)} parameters, file holds {count}")
    return cfg, ParameterSet(cfg, flat)


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


__all__ = ["MAGIC", "FORMAT_VERSION", "crc64", "checkpoint_bytes", "save_checkpoint",
           "load_checkpoint", "parse_checkpoint"]
