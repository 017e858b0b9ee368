"""Binary checkpoint container.

Layout (all integers little-endian uint32 unless noted):

    8 bytes   magic "GANLAB01"
    32 bytes  spec digest (raw sha256)
    u32 + N   JSON metadata (configs, optimizer counters, RNG stream states)
    u32       tensor count
    per tensor: u32 name length, name bytes (utf-8), u32 rank,
                rank x u32 extents, float64 little-endian data
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import CorruptCheckpointError

MAGIC = b"GANLAB01"


def combined_digest(specs: dict) -> str:
    """sha256 over the named spec digests, order independent."""
    h = hashlib.sha256()
    for name in sorted(specs):
        h.update(f"{name}={specs[name]};".encode())
    return h.hexdigest()


def write_checkpoint(path, digest: str, meta: dict, tensors: dict):
    """Write atomically: temp file in the same directory, then rename."""
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, bytes.fromhex(digest), struct.pack("<I", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path):
    """Return (digest hex, meta dict, {name: ndarray})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    if r.take(8) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic at byte offset 0")
    digest = r.take(32).hex()
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpointError(f"{path}: unreadable metadata block") from None
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise CorruptCheckpointError(f"{path}: trailing bytes at offset {r.pos}")
    return digest, meta, tensors
