"""Shared binary serialization: named array blocks + CRC32 trailer.

All checkpoint formats in this package (codec "MECQ", unit codebook "MECA",
sequence model "MECL", feature autoencoder "MECF") share the same body
layout after their magic/version/header: a u32 count of named arrays, then
per array a length-prefixed utf-8 name, a dtype code, a u8 ndim, u32 dims,
and raw little-endian data. The file ends with a CRC32 over everything
before the trailer.
"""

from __future__ import annotations

import struct
import zlib
from typing import BinaryIO

import numpy as np

from .errors import ChecksumError, FormatError

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported array dtype {arr.dtype} for '{name}'")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(dt, copy=False).tobytes())
    return b"".join(out)


def unpack_arrays(buf: bytes, base_offset: int = 0) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", base_offset + pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "array name length"))
        name = take(name_len, "array name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"array header of '{name}'"))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for '{name}'", base_offset + pos - 2)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of '{name}'"))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = take(nbytes, f"data of '{name}'")
        arrays[name] = np.frombuffer(data, dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise FormatError("trailing bytes after final array", base_offset + pos)
    return arrays


def write_checked(path: str, magic: bytes, header: bytes, arrays: dict[str, np.ndarray]) -> None:
    """Write magic + header + packed arrays, with a CRC32 trailer."""
    payload = magic + header + pack_arrays(arrays)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", crc))


def read_checked(path: str, magic: bytes) -> tuple[bytes, int]:
    """Read and CRC-verify a checkpoint; returns (body after magic, body offset)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(magic) + 4:
        raise FormatError("file too short for magic and checksum trailer", len(blob))
    payload, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(
            f"checksum mismatch in {path}: stored {stored:#010x}, computed {actual:#010x}"
        )
    if payload[: len(magic)] != magic:
        raise FormatError(
            f"bad magic: expected {magic!r}, found {payload[:len(magic)]!r}", 0
        )
    return payload[len(magic) :], len(magic)


def read_struct(f: BinaryIO, fmt: str, what: str) -> tuple:
    size = struct.calcsize(fmt)
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"truncated while reading {what}", f.tell() - len(data))
    return struct.unpack(fmt, data)
