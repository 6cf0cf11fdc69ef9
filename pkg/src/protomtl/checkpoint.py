"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic   8 bytes  b"PMTLCKPT"
    version u32
    hlen    u32      length of the UTF-8 JSON header that follows
    header  hlen bytes (arbitrary JSON metadata, e.g. config + step)
    count   u32      number of named arrays
    entries, sorted by name:
        nlen u16, name UTF-8
        ndim u8, dims u32 each
        data float64 little-endian, row-major

Save -> load -> save reproduces the file byte-for-byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"PMTLCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks.append(struct.pack("<I", len(hbytes)))
    chunks.append(hbytes)
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nbytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nbytes)))
        chunks.append(nbytes)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} != supported {CHECKPOINT_VERSION}"
        )
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        arrays[name] = arr.astype(np.float64)
    return header, arrays
