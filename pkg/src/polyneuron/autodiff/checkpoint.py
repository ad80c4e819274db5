"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"PNCKPT\\x00\\x01"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes
    n_arrays   u32
    per array:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64, 2 = int64)
        ndim     u8
        dims     ndim x u32
        data     little-endian, C order
"""

from __future__ import annotations

import json
import struct

import numpy as np

from polyneuron.exceptions import CheckpointError

MAGIC = b"PNCKPT\x00\x01"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        code = _CODES[arr.dtype]
        key = name.encode()
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load(path):
    """Return ``(meta, arrays)``; raises :class:`CheckpointError` on any defect."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:8]!r})")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (needed {n} more)")
        out = buf[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return meta, arrays
