"""Named-tensor container used for checkpoints, mask dumps and benchmark fixtures.

Layout::

    8 bytes   little-endian uint64: header length N
    N bytes   UTF-8 JSON list of {"name", "dtype", "shape", "byte_offset"}
    payload   raw little-endian row-major values, concatenated in header order

``byte_offset`` is relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int32": np.dtype("<i4"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class ContainerError(ValueError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return name
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode(entries: Mapping[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> bytes:
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ContainerError(f"duplicate entry names: {', '.join(dup)}")
    header, chunks, offset = [], [], 0
    for name, arr in items:
        arr = np.asarray(arr)
        dname = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dname]).tobytes()
        header.append({"name": name, "dtype": dname, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8:
        raise ContainerError("truncated container: missing header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise ContainerError("truncated container: header runs past end of file")
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    if not isinstance(header, list):
        raise ContainerError("corrupt header: expected a list of entries")
    payload = memoryview(blob)[8 + n:]
    out: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header:
        try:
            name, dname, shape, off = entry["name"], entry["dtype"], entry["shape"], entry["byte_offset"]
        except (KeyError, TypeError) as exc:
            raise ContainerError(f"corrupt header entry {entry!r}") from exc
        if name in out:
            raise ContainerError(f"duplicate entry name {name!r}")
        if dname not in DTYPES:
            raise ContainerError(f"unknown dtype {dname!r} for {name!r}")
        if off != expected:
            raise ContainerError(f"entry {name!r}: byte_offset {off} does not follow previous entry (expected {expected})")
        dt = DTYPES[dname]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(payload):
            raise ContainerError(f"truncated payload: entry {name!r} needs bytes {off}..{off + nbytes}, have {len(payload)}")
        out[name] = np.frombuffer(payload[off:off + nbytes], dtype=dt).reshape(shape).copy()
        expected = off + nbytes
    if expected != len(payload):
        raise ContainerError(f"payload length {len(payload)} does not match header total {expected}")
    return out


def container_write(path: str | Path, entries) -> None:
    Path(path).write_bytes(encode(entries))


def container_read(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
