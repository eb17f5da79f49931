"""Little-endian tensor record files (checkpoints and feature dumps).

Layout: b"TOTM", u32 format version, then records until EOF, each
``u32 name_len, name (utf-8), u32 rank, u64 dims[rank], f64 payload``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TOTM"
VERSION = 1


class FormatError(ValueError):
    pass


def dump_records(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_records(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(data):
                raise FormatError(f"{source}: truncated payload for {name!r}")
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: truncated record") from exc
    return out


def write_records(path: str | Path, records: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_records(records))
    os.replace(tmp, path)


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    return load_records(path.read_bytes(), str(path))
