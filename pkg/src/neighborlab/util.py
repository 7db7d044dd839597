"""Shared plumbing: error types, deterministic seed derivation, content keys."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Iterator, Sequence


class NeighborlabError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(NeighborlabError):
    """A file is malformed, truncated, or carries an unknown magic/version."""


class ValidationError(NeighborlabError):
    """Data or arguments violate a documented contract."""


def derive_seed(base: int, *parts: Any) -> int:
    """Mix a base seed with context labels into a new 64-bit seed.

    Stable across processes and platforms (unlike ``hash``), so draws keyed
    by (seed, epoch, image id) never depend on iteration or batch order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def stable_json(obj: Any) -> str:
    """Canonical JSON used for hashing: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_key(obj: Any) -> str:
    """Short hex digest identifying a JSON-serializable payload."""
    return hashlib.sha256(stable_json(obj).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def chunked(seq: Sequence, size: int) -> Iterator[Sequence]:
    """Yield consecutive slices of ``seq`` of length ``size`` (last may be short)."""
    if size < 1:
        raise ValueError("chunk size must be >= 1")
    for start in range(0, len(seq), size):
        yield seq[start : start + size]
