"""Binary checkpoint container.

Layout (little-endian throughout):

    magic          4 bytes  b"FGCK"
    version        u32
    entry count    u32
    per entry:
        name length  u32
        name         UTF-8 bytes
        rank         u32
        dims         u32 * rank
        payload      f32 * prod(dims)
    metadata length  u32
    metadata         UTF-8 JSON

Entries are written sorted by name so identical state always serializes to
identical bytes.  Metadata holds step counts, config hashes and any other
small JSON-serializable run provenance.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .util import ContractError, canonical_json

MAGIC = b"FGCK"
VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    metadata: dict | None = None) -> None:
    """Write named float arrays plus a JSON metadata block."""
    path = Path(path)
    names = sorted(arrays)
    parts: list[bytes] = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(arrays[name], dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d stays 0-d: always contiguous
        if not np.isfinite(arr).all():
            raise ContractError(f"checkpoint entry {name!r} contains non-finite values")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    meta = canonical_json(metadata or {}).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ContractError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (arrays, metadata)."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise ContractError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        n = 1
        for d in dims:
            n *= d
        payload = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        arrays[name] = payload.copy()
    meta_len = r.u32()
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    if r.off != len(r.buf):
        raise ContractError(f"{path}: {len(r.buf) - r.off} trailing bytes after metadata")
    return arrays, metadata
