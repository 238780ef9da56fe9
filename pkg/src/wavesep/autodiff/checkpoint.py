"""Flat binary container for parameters.

Layout (all little-endian)::

    b"DMX1" | u32 version | u32 entry count | u32 config length | config bytes
    per entry: u32 name length | name (utf-8) | u8 dtype tag | u32 rank |
               u64 extent * rank | f64 scale | raw data

dtype tag 1 is float32, 2 is float64. The config block is produced by
:func:`pack_config`: a 4-byte kind, a u32 config version, a u32 field count,
then per field ``u16 name length | name | u8 type ('i', 'd' or 'b') | value``
with ints as i64, floats as f64 and bools as u8.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FormatError

MAGIC = b"DMX1"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def pack_config(kind: bytes, version: int, fields: Iterable[tuple[str, object]]) -> bytes:
    fields = list(fields)
    out = bytearray(kind[:4].ljust(4, b" ") + struct.pack("<II", version, len(fields)))
    for name, value in fields:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        if isinstance(value, (bool, np.bool_)):
            out += b"b" + struct.pack("<B", int(value))
        elif isinstance(value, (int, np.integer)):
            out += b"i" + struct.pack("<q", int(value))
        elif isinstance(value, (float, np.floating)):
            out += b"d" + struct.pack("<d", float(value))
        else:
            raise TypeError(f"config field {name} has unsupported type {type(value).__name__}")
    return bytes(out)


def unpack_config(block: bytes) -> tuple[bytes, int, dict[str, object]]:
    try:
        kind = block[:4]
        version, count = struct.unpack_from("<II", block, 4)
        pos = 12
        fields: dict[str, object] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", block, pos)
            name = block[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            tag = block[pos:pos + 1]
            pos += 1
            if tag == b"b":
                fields[name] = bool(block[pos])
                pos += 1
            elif tag == b"i":
                (fields[name],) = struct.unpack_from("<q", block, pos)
                pos += 8
            elif tag == b"d":
                (fields[name],) = struct.unpack_from("<d", block, pos)
                pos += 8
            else:
                raise FormatError(f"unknown config field type {tag!r}")
    except (struct.error, UnicodeDecodeError, IndexError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from exc
    return kind, version, fields


def save_checkpoint(path: str | Path, entries: Iterable[tuple[str, np.ndarray, float]],
                    config: bytes = b"") -> None:
    entries = list(entries)
    out = bytearray(MAGIC + struct.pack("<III", VERSION, len(entries), len(config)) + config)
    for name, array, scale in entries:
        array = np.asarray(array)
        if array.dtype not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {array.dtype}")
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<BI", _TAGS[array.dtype], array.ndim)
        out += struct.pack(f"<{array.ndim}Q", *array.shape)
        out += struct.pack("<d", scale)
        out += array.astype(_DTYPES[_TAGS[array.dtype]]).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[bytes, list[tuple[str, np.ndarray, float]]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a DMX1 checkpoint")
    try:
        version, count, config_len = struct.unpack_from("<III", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        config = data[pos:pos + config_len]
        pos += config_len
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            tag, rank = struct.unpack_from("<BI", data, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            (scale,) = struct.unpack_from("<d", data, pos)
            pos += 8
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: truncated entry {name}")
            array = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            entries.append((name, array.reshape(shape).astype(dtype.newbyteorder("=")), scale))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, entries
