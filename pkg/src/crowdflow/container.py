"""ESDF binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic        4 bytes   b"ESDF"
    version      u32       FORMAT_VERSION
    n_records    u32
    n_records times:
        name_len u32       byte length of the UTF-8 name
        name     name_len bytes
        ndim     u32
        dims     ndim x u64
        data     prod(dims) x float64 (little-endian, row-major)

Records are written in the order given, so a fixed insertion order yields a
byte-identical file.  Text payloads (config snapshots) are stored as one
float per UTF-8 byte via :func:`encode_text` / :func:`decode_text`.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ESDF"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def save_records(path, records: dict[str, np.ndarray]):
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8").copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: not an ESDF container (bad magic {buf[:4]!r})")
    pos = 4

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ContainerError(f"{path}: truncated container at byte {pos}")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    version, count = read("<II")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported ESDF version {version} (expected {FORMAT_VERSION})")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        if pos + name_len > len(buf):
            raise ContainerError(f"{path}: truncated record name at byte {pos}")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = read("<I")
        dims = read(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(dims)) if ndim else 1
        if pos + 8 * n > len(buf):
            raise ContainerError(f"{path}: truncated data for record {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
        records[name] = arr
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes after last record")
    return records


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")
