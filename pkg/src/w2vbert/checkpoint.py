"""Binary tensor container.

Layout (little endian)::

    b"W2VB" | version u32 | tensor count u32
    per tensor: name length u16, UTF-8 name, dtype code u8, rank u8,
                dims u64 * rank, payload
    CRC32 u32 over every per-tensor record

dtype codes: 0 = float32, 1 = float64, 2 = int64.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"W2VB"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r}: name or rank too large")
        body += struct.pack("<H", len(raw_name)) + raw_name
        body += struct.pack("<BB", _CODES[dt], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=dt).tobytes()
    header = MAGIC + struct.pack("<II", VERSION, len(tensors))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(blob) < 12:
        raise CheckpointIntegrityError(f"{source}: file too short for a header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise IncompatibleCheckpointError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise IncompatibleCheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    end = len(blob) - 4
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(n, what):
        if pos + n > end:
            raise CheckpointIntegrityError(f"{source}: truncated while reading {what}")

    for i in range(count):
        need(2, f"name length of tensor {i}")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(nlen + 2, f"name of tensor {i}")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointIntegrityError(f"{source}: tensor {name!r} has unknown dtype code {code}")
        need(8 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"payload of {name!r} ({nbytes} bytes)")
        out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != end:
        raise CheckpointIntegrityError(f"{source}: {end - pos} unexpected bytes after the last tensor")
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(blob[12:end]) != crc:
        raise CheckpointIntegrityError(f"{source}: CRC mismatch, payload is corrupt")
    return out


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = encode_tensors(tensors)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_tensors(blob, str(path))
