"""Versioned binary container shared by dataset and checkpoint files.

Layout::

    magic (8 bytes) | schema version (uint32 LE) | header length (uint64 LE)
    | header (UTF-8 JSON) | tensor payload (little-endian) | sha256 digest (32 bytes)

The header lists every tensor with its name, dtype and shape in payload
order. Nothing time- or host-dependent is written, so identical inputs give
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ContainerError(ValueError):
    """Raised when a container file is malformed, of the wrong kind, or corrupt."""


def write_container(
    path: str | Path,
    magic: bytes,
    version: int,
    meta: dict[str, Any],
    tensors: list[tuple[str, np.ndarray]],
) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    layout = []
    chunks = []
    for name, arr in tensors:
        arr = np.asarray(arr)
        code = "f8" if arr.dtype.kind == "f" else "i8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        layout.append({"name": name, "dtype": code, "shape": list(data.shape)})
        chunks.append(data.tobytes())
    header = json.dumps({"meta": meta, "tensors": layout}, sort_keys=True).encode("utf-8")
    body = b"".join(
        [magic, struct.pack("<I", version), struct.pack("<Q", len(header)), header, *chunks]
    )
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def read_container(
    path: str | Path, magic: bytes, version: int
) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 52 or raw[:8] != magic:
        raise ContainerError(f"{path}: not a {magic.decode(errors='replace')} file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch")
    (found,) = struct.unpack("<I", body[8:12])
    if found != version:
        raise ContainerError(f"{path}: schema version {found}, expected {version}")
    (hlen,) = struct.unpack("<Q", body[12:20])
    header = json.loads(body[20 : 20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise ContainerError(f"{path}: trailing bytes after payload")
    return header["meta"], tensors
