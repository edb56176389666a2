"""Named-tensor checkpoint persistence.

File layout: magic "SRSCKPT1", a u32-length-prefixed UTF-8 JSON config
document, a sequence of tensor entries (u32 name length, name bytes,
u64 rank, rank x u64 dims, float32 little-endian payload), and a trailing
64-bit checksum (blake2b-8) over everything before it. Round trips are
bitwise lossless.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, VersionMismatch

MAGIC = b"SRSCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A config document plus an ordered map of named float32 tensors."""

    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.config.get("epoch", 0))


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    doc = dict(ckpt.config)
    doc.setdefault("format_version", FORMAT_VERSION)
    doc_bytes = json.dumps(doc, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(doc_bytes)), doc_bytes]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + _checksum(body))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise ChecksumMismatch(f"file too short to be a checkpoint: {path}")
    body, stored = raw[:-8], raw[-8:]
    if _checksum(body) != stored:
        raise ChecksumMismatch(f"checksum mismatch in {path}")
    if body[: len(MAGIC)] != MAGIC:
        raise VersionMismatch(f"bad magic in {path}: {body[:8]!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise ChecksumMismatch(f"truncated entry in {path}")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    (doc_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(doc_len).decode("utf-8"))
    if config.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format version {config.get('format_version')}")

    tensors: dict[str, np.ndarray] = {}
    while pos < len(body):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        numel = int(np.prod(dims)) if rank else 1
        payload = take(4 * numel)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Checkpoint(config=config, tensors=tensors)
