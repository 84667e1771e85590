"""Small shared helpers: stable hashing, seeds, and canonical JSON."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


def stable_digest(*parts: Any) -> bytes:
    """Platform-stable digest of a tuple of printable values.

    Never uses Python's builtin hash(), which is salted per process.
    """
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def stable_seed(*parts: Any) -> int:
    """Derive a deterministic 63-bit seed from arbitrary values."""
    return int.from_bytes(stable_digest(*parts)[:8], "little") >> 1


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    """Deterministic single-line JSON (sorted keys, no trailing whitespace)."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
