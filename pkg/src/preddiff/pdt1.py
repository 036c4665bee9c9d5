"""PDT1 tensor files and the header+blobs container built on them.

A PDT1 blob is ``b"PDT1"``, little-endian ``u32`` rank, ``u32`` dims, a
``u8`` dtype tag and the row-major payload. Tag 1 is float32; tag 2 (float64)
and tag 3 (int64) are extensions used where bit-exact persistence of fitted
parameters and counts matters.

A container file is one line of JSON followed by a sequence of PDT1 blobs.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PDT1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
TAGS = {np.dtype(v).str: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def dump(array, fh: BinaryIO, dtype=np.float32) -> None:
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    tag = TAGS.get(arr.dtype.str)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", tag))
    fh.write(arr.tobytes(order="C"))


def load(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    try:
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        (tag,) = struct.unpack("<B", fh.read(1))
    except struct.error as exc:
        raise FormatError("truncated PDT1 header") from exc
    if tag not in DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64))
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated PDT1 payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def dumps(array, dtype=np.float32) -> bytes:
    buf = io.BytesIO()
    dump(array, buf, dtype)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return load(io.BytesIO(data))


def save(path, array, dtype=np.float32) -> None:
    with open(path, "wb") as fh:
        dump(array, fh, dtype)


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = load(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after PDT1 payload")
    return arr


def write_container(path, header: dict, blobs: list[tuple[np.ndarray, object]]) -> None:
    """Write ``header`` as one JSON line, then each ``(array, dtype)`` as PDT1."""
    header = dict(header, blobs=len(blobs))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for array, dtype in blobs:
            dump(array, fh, dtype)


def read_container(path) -> tuple[dict, list[np.ndarray]]:
    with open(Path(path), "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad container header") from exc
        arrays = [load(fh) for _ in range(int(header.get("blobs", 0)))]
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after container blobs")
    return header, arrays
