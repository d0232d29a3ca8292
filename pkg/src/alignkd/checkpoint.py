"""The ``AKD1`` binary tensor container.

Layout (all integers little-endian unsigned 64-bit)::

    b"AKD1"
    header_len, header bytes   (UTF-8 ``key=value`` lines)
    repeated until EOF:
        name_len, name bytes, rank, dims[rank], float32 data (row-major)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"AKD1"
_U64 = struct.Struct("<Q")


def encode(header: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    parts += [_U64.pack(len(text)), text]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [_U64.pack(len(raw)), raw, _U64.pack(arr.ndim)]
        parts += [_U64.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not an AKD1 file")
    pos = 4

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(blob):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U64.unpack_from(blob, pos)
        pos += 8
        return v

    n = u64()
    header: dict[str, str] = {}
    for line in blob[pos : pos + n].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    pos += n
    tensors = {}
    while pos < len(blob):
        name_len = u64()
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dims = tuple(u64() for _ in range(u64()))
        count = int(np.prod(dims, dtype=np.int64))
        end = pos + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos = end
    return header, tensors


def write(path: str | os.PathLike, header: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically; a failed write leaves no partial file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(header, tensors))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
