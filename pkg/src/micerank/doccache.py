"""Persistent store for precomputed frozen document states.

File layout (integers little-endian):

* magic ``MICEDOC1`` (8 bytes)
* version u32, hidden size u32, stream-split depth u32
* checkpoint hash (32 bytes): fingerprint of the producing weights
* document count u32
* index table, one entry per document: id length u32, id (utf-8),
  token count ``m`` u32, absolute payload offset u64
* payload region: per document ``(m + 1) * hidden`` floats, 32-bit
  little-endian, row-major

Payloads are always 32-bit regardless of compute precision (the cache is an
inference artifact; tests that need 64 bits bypass it). Lookups are lazy and
O(1) via the offset table; the file is mapped read-only so concurrent reads
are safe. Writing is single-writer and atomic (temp file + rename).
"""

from __future__ import annotations

import logging
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mice import DocState

__all__ = [
    "MAGIC",
    "VERSION",
    "CacheFormatError",
    "CacheMismatchError",
    "CacheHeader",
    "DocStateCache",
    "write_cache",
    "read_cache",
]

MAGIC = b"MICEDOC1"
VERSION = 1

_HEADER = struct.Struct("<8sIII32sI")

log = logging.getLogger(__name__)


class CacheFormatError(ValueError):
    """The file is not a valid document-state cache."""


class CacheMismatchError(RuntimeError):
    """The cache was produced by a different checkpoint than the consumer's."""


@dataclass(frozen=True)
class CacheHeader:
    version: int
    hidden: int
    split_depth: int
    checkpoint_hash: bytes
    doc_count: int


def write_cache(
    path,
    states: Sequence[DocState] | Iterable[DocState],
    hidden: int,
    split_depth: int,
    checkpoint_hash: bytes,
) -> None:
    """Persist document states; replaces ``path`` atomically on success."""
    states = list(states)
    if len(checkpoint_hash) != 32:
        raise ValueError("checkpoint_hash must be a 32-byte digest")
    seen: set[str] = set()
    for doc in states:
        if doc.states.shape[1] != hidden:
            raise ValueError(
                f"document {doc.doc_id!r} has width {doc.states.shape[1]}, cache expects {hidden}"
            )
        if doc.doc_id in seen:
            raise ValueError(f"duplicate doc id {doc.doc_id!r}")
        seen.add(doc.doc_id)
    ids = [doc.doc_id.encode("utf-8") for doc in states]
    index_size = sum(4 + len(raw) + 4 + 8 for raw in ids)
    offset = _HEADER.size + index_size
    entries = []
    for doc, raw in zip(states, ids):
        entries.append((raw, doc.m, offset))
        offset += (doc.m + 1) * hidden * 4

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as out:
            out.write(
                _HEADER.pack(MAGIC, VERSION, hidden, split_depth, checkpoint_hash, len(states))
            )
            for raw, m, off in entries:
                out.write(struct.pack("<I", len(raw)))
                out.write(raw)
                out.write(struct.pack("<IQ", m, off))
            for doc in states:
                out.write(np.ascontiguousarray(doc.states, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class DocStateCache:
    """Read view over a cache file; lazy per-document lookups by id."""

    def __init__(self, path, header: CacheHeader, index: dict, mm: mmap.mmap):
        self.path = Path(path)
        self.header = header
        self._index = index
        self._mm = mm

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._index

    def doc_ids(self) -> list[str]:
        return list(self._index)

    def get(self, doc_id: str) -> DocState:
        try:
            m, offset = self._index[doc_id]
        except KeyError:
            raise KeyError(f"unknown doc id {doc_id!r} in cache {self.path}") from None
        count = (m + 1) * self.header.hidden
        states = np.frombuffer(self._mm, dtype="<f4", count=count, offset=offset)
        states = states.reshape(m + 1, self.header.hidden).copy()
        states.setflags(write=False)
        return DocState(
            doc_id=doc_id,
            states=states,
            m=m,
            checkpoint_hash=self.header.checkpoint_hash,
        )

    def close(self) -> None:
        self._mm.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_cache(path, expected_hash: bytes | None = None, strict: bool = True) -> DocStateCache:
    """Open a cache for lazy lookups.

    When ``expected_hash`` is given it is compared against the stored
    checkpoint hash: a mismatch raises :class:`CacheMismatchError` in strict
    mode and logs a warning otherwise.
    """
    path = Path(path)
    with open(path, "rb") as f:
        mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
    try:
        if len(mm) < _HEADER.size:
            raise CacheFormatError(f"{path} is too short to be a document cache")
        magic, version, hidden, split_depth, ckpt_hash, doc_count = _HEADER.unpack(
            mm[: _HEADER.size]
        )
        if magic != MAGIC:
            raise CacheFormatError(f"{path} is not a document cache (bad magic)")
        if version != VERSION:
            raise CacheFormatError(
                f"{path} has unsupported cache version {version} (expected {VERSION})"
            )
        header = CacheHeader(version, hidden, split_depth, ckpt_hash, doc_count)
        index: dict[str, tuple[int, int]] = {}
        pos = _HEADER.size
        for _ in range(doc_count):
            if pos + 4 > len(mm):
                raise CacheFormatError(f"{path}: truncated index table")
            (id_len,) = struct.unpack("<I", mm[pos : pos + 4])
            pos += 4
            if pos + id_len + 12 > len(mm):
                raise CacheFormatError(f"{path}: truncated index table")
            doc_id = mm[pos : pos + id_len].decode("utf-8")
            pos += id_len
            m, offset = struct.unpack("<IQ", mm[pos : pos + 12])
            pos += 12
            end = offset + (m + 1) * hidden * 4
            if end > len(mm):
                raise CacheFormatError(f"{path}: payload of {doc_id!r} runs past end of file")
            index[doc_id] = (m, offset)
        if expected_hash is not None and expected_hash != ckpt_hash:
            message = (
                f"cache {path} was produced by a different checkpoint "
                f"(stored {ckpt_hash.hex()[:12]}..., expected {expected_hash.hex()[:12]}...)"
            )
            if strict:
                raise CacheMismatchError(message)
            log.warning("%s", message)
    except BaseException:
        mm.close()
        raise
    return DocStateCache(path, header, index, mm)
