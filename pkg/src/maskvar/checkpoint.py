"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MVAR"                      magic
    u32  format version
    u32  header length, then that many bytes of UTF-8 JSON (sorted keys)
    u32  tensor count
    per tensor:
        u32 name length, name (UTF-8)
        u32 rank, then rank x u64 dims
        prod(dims) x float64 (row-major)

The JSON header carries the model configs, the names of tensors shared
between namespaces, and any training metadata (step, RNG states, ...).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MVAR"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def write_container(path: str | Path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as err:
        raise CheckpointError(f"cannot write checkpoint {path}: {err}") from err


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 12
        header = json.loads(buf[off : off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)
            off += 8 * n
            tensors[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({err})") from err
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return header, tensors
