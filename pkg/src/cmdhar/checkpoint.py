"""Portable binary checkpoint format.

Layout (little-endian throughout):

    magic      4 bytes    b"CMDH"
    version    u32
    entry_count u32
    entries, sorted ascending by name, each:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        dims     rank * u32
        data     prod(dims) * f32 (IEEE-754)

Values are stored as 32-bit floats; loading widens them back to the working
precision exactly, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMDH"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint bytes; message carries the failing byte offset."""


def serialize(entries: dict[str, np.ndarray]) -> bytes:
    """Pack named arrays into checkpoint bytes (names sorted ascending)."""
    names = sorted(entries)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate entry names")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(names))
    for name in names:
        raw = name.encode("utf-8")
        arr = np.asarray(entries[name])
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.astype("<f4").tobytes()
    return bytes(out)


def deserialize(blob: bytes) -> dict[str, np.ndarray]:
    """Unpack checkpoint bytes into name -> float64 array."""
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated {what} at byte offset {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if need(4, "magic") != MAGIC:
        raise CheckpointError("bad magic at byte offset 0")
    version = struct.unpack("<I", need(4, "version"))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte offset 4")
    count = struct.unpack("<I", need(4, "entry count"))[0]

    entries: dict[str, np.ndarray] = {}
    prev_name = None
    for _ in range(count):
        name_len = struct.unpack("<H", need(2, "name length"))[0]
        name_off = off
        try:
            name = need(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"invalid UTF-8 name at byte offset {name_off}") from None
        if prev_name is not None and not (prev_name < name):
            raise CheckpointError(
                f"entry names not sorted/unique at byte offset {name_off}")
        prev_name = name
        rank = struct.unpack("<B", need(1, "rank"))[0]
        dims = tuple(struct.unpack("<I", need(4, "dim"))[0] for _ in range(rank))
        n = 1
        for d in dims:
            n *= d
        data = np.frombuffer(need(4 * n, f"data of {name!r}"), dtype="<f4")
        entries[name] = data.astype(np.float64).reshape(dims)
    if off != len(blob):
        raise CheckpointError(f"trailing garbage at byte offset {off}")
    return entries


def save(entries: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(serialize(entries))


def load(path) -> dict[str, np.ndarray]:
    return deserialize(Path(path).read_bytes())


def count_params(source) -> int:
    """Total scalar count across entries; accepts a path or loaded dict."""
    if isinstance(source, dict):
        entries = source
    else:
        entries = load(source)
    return int(sum(int(np.asarray(v).size) for v in entries.values()))
