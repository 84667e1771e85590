"""Exact brute-force cosine retrieval over stored embeddings.

Candidate pools are small (a few thousand chunks per document), so the index
is a dense matrix scanned in full on every query. Cosine is the metric, not
dot product, because composed vectors are deliberately unnormalized. Ties are
broken by ascending chunk id (document id, then ordinal) so results never
depend on insertion order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import ChunkId

INDEX_MAGIC = b"SITIDX01"
INDEX_VERSION = 1


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked (chunk_id, score) hits, descending score."""

    ranked: tuple[tuple[ChunkId, float], ...]
    k: int
    flags: tuple[str, ...] = ()

    @property
    def ids(self) -> tuple[ChunkId, ...]:
        return tuple(cid for cid, _ in self.ranked)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(score for _, score in self.ranked)


class VectorIndex:
    """Immutable store of chunk embeddings with exact top-k search."""

    def __init__(
        self,
        ids: Sequence[ChunkId],
        vectors: np.ndarray,
        metadata: Mapping | None = None,
    ):
        ids = tuple((str(d), int(o)) for d, o in ids)
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-d, got shape {vectors.shape}")
        if len(ids) != vectors.shape[0]:
            raise ValueError(f"{len(ids)} ids for {vectors.shape[0]} vectors")
        if len(ids) == 0:
            raise ValueError("index must hold at least one entry")
        if vectors.shape[1] < 1:
            raise ValueError("vectors must have at least one dimension")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("index vectors must be finite")
        seen = set()
        for cid in ids:
            if cid in seen:
                raise ValueError(f"duplicate chunk id {cid}")
            seen.add(cid)
        vectors.setflags(write=False)
        self._ids = ids
        self._vectors = vectors
        self._metadata = dict(metadata or {})
        self._norms = np.linalg.norm(vectors, axis=1)
        self._norms.setflags(write=False)
        # precomputed tie-break keys: ascending doc id, then ordinal
        self._doc_keys = np.array([d for d, _ in ids])
        self._ordinals = np.array([o for _, o in ids], dtype=np.int64)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def ids(self) -> tuple[ChunkId, ...]:
        return self._ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def metadata(self) -> dict:
        return dict(self._metadata)


def build_index(
    embeddings: Sequence[tuple[ChunkId, np.ndarray]],
    metadata: Mapping | None = None,
) -> VectorIndex:
    """Build an index from (chunk_id, vector) pairs.

    Vectors are stored exactly as given; any composition happens upstream.
    """
    if not embeddings:
        raise ValueError("index must hold at least one entry")
    ids = [cid for cid, _ in embeddings]
    dims = {np.asarray(v).shape for _, v in embeddings}
    bad = [s for s in dims if len(s) != 1]
    if bad or len(dims) > 1:
        raise ValueError(f"vectors must share one 1-d shape, got {sorted(dims)}")
    vectors = np.vstack([np.asarray(v, dtype=np.float64) for _, v in embeddings])
    return VectorIndex(ids, vectors, metadata)


def query_topk(index: VectorIndex, q_vector: np.ndarray, k: int) -> RetrievalResult:
    """Exact cosine top-k. A stored zero vector scores -1 and sorts last; a
    zero query flags the result and falls back to the ordinal-order ranking."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(q_vector, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query vector must be finite")

    n = len(index)
    qn = float(np.linalg.norm(q))
    flags: tuple[str, ...] = ()
    if qn == 0.0:
        cos = np.full(n, -1.0)
        flags = ("zero-query",)
    else:
        denom = index._norms * qn
        valid = denom > 0.0
        dot = index._vectors @ q
        cos = np.where(valid, dot / np.where(valid, denom, 1.0), -1.0)

    order = np.lexsort((index._ordinals, index._doc_keys, -cos))
    top = order[: min(k, n)]
    ranked = tuple((index._ids[i], float(cos[i])) for i in top)
    return RetrievalResult(ranked=ranked, k=k, flags=flags)


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write the index: fixed header, metadata JSON, id table, packed rows.

    Layout (little-endian): magic 8s, version u32, dim u32, count u64,
    metadata length u64, metadata JSON, id-table length u64, id-table JSON,
    then count*dim float64 vectors in row-major order.
    """
    meta = json.dumps(index.metadata, sort_keys=True).encode("utf-8")
    table = json.dumps([[d, o] for d, o in index.ids]).encode("utf-8")
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IIQQ", INDEX_VERSION, index.dim, len(index), len(meta)))
        f.write(meta)
        f.write(struct.pack("<Q", len(table)))
        f.write(table)
        f.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())


def load_index(path: str | Path) -> VectorIndex:
    with open(path, "rb") as f:
        magic = f.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: not an index file (bad magic {magic!r})")
        version, dim, count, meta_len = struct.unpack("<IIQQ", f.read(24))
        if version != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        metadata = json.loads(f.read(meta_len))
        (table_len,) = struct.unpack("<Q", f.read(8))
        ids = [(d, o) for d, o in json.loads(f.read(table_len))]
        buf = f.read(count * dim * 8)
        if len(buf) != count * dim * 8:
            raise ValueError(f"{path}: truncated vectors ({len(buf)} bytes)")
        vectors = np.frombuffer(buf, dtype="<f8").reshape(count, dim).copy()
    return VectorIndex(ids, vectors, metadata)
