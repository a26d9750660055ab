"""Shared binary container layout: magic, length-prefixed JSON header, raw blocks.

Every on-disk artifact with array payloads (scenes, encoder models, cluster
trees, sample sets) uses the same envelope::

    bytes 0-3    ASCII magic
    bytes 4-7    header length H, little-endian uint32
    bytes 8..8+H UTF-8 JSON header (canonical: sorted keys, no whitespace)
    remainder    raw little-endian array blocks, caller-defined order

Writes are atomic (temp file + rename) and canonical, so write -> read ->
write is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import SceneFormatError


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_container(path: str | Path, magic: bytes, header: dict, blocks: list[np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    header_bytes = canonical_json_bytes(header)
    parts = [magic, struct.pack("<I", len(header_bytes)), header_bytes]
    for block in blocks:
        le = np.ascontiguousarray(block, dtype=block.dtype.newbyteorder("<"))
        parts.append(le.tobytes(order="C"))
    atomic_write_bytes(path, b"".join(parts))


def read_container(path: str | Path, magic: bytes) -> tuple[dict, bytes]:
    """Header dict and remaining payload bytes; validates magic and header size."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise SceneFormatError(f"{path}: truncated container ({len(raw)} bytes)")
    if raw[:4] != magic:
        raise SceneFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise SceneFormatError(f"{path}: truncated header (need {hlen} bytes, have {len(raw) - 8})")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{path}: unreadable header: {exc}") from exc
    return header, raw[8 + hlen :]


def split_blocks(path: str | Path, payload: bytes, shapes: list[tuple], dtype: str) -> list[np.ndarray]:
    """Slice payload into arrays of the given shapes; exact size required."""
    itemsize = np.dtype(dtype).itemsize
    counts = [int(np.prod(shape)) for shape in shapes]
    expected = sum(counts) * itemsize
    if len(payload) != expected:
        raise SceneFormatError(
            f"{path}: payload size mismatch (expected {expected} bytes, found {len(payload)})"
        )
    out = []
    offset = 0
    for shape, count in zip(shapes, counts):
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        out.append(arr.reshape(shape).astype(np.dtype(dtype).newbyteorder("=")))
        offset += count * itemsize
    return out
