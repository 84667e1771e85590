"""Documents, segmentation, situated contexts, and query-chunk pair construction.

The pipeline turns long narrative documents into fixed-granularity retrieval
units:

    Document --> sentences --> Segments (greedy ~target tokens)
             --> ContextGroups (fixed runs of segments)
             --> ContextWindows (the surrounding text a chunk is embedded with)

Annotations anchored to character spans become QueryChunkPairs, each carrying
gold chunk ids, one context window per gold, and sampled negative chunk ids.
"""

from __future__ import annotations

import bisect
import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

from .util import stable_seed

logger = logging.getLogger(__name__)

ChunkId = tuple[str, int]

DEFAULT_SEGMENT_TOKENS = 200
DEFAULT_GROUP_SIZE = 16
DEFAULT_CONTEXT_CAP_TOKENS = 8192
CONTEXT_MULTIPLES = (4, 8, 16, 32, 64)


# ---------------------------------------------------------------------------
# token counting


_TOKEN_SCHEMES: dict[str, Callable[[str], int]] = {}


def register_token_scheme(name: str, fn: Callable[[str], int]) -> None:
    """Register a pluggable token counter under a scheme name."""
    if not name:
        raise ValueError("token scheme name must be non-empty")
    _TOKEN_SCHEMES[name] = fn


def token_schemes() -> list[str]:
    return sorted(_TOKEN_SCHEMES)


def count_tokens(text: str, scheme: str = "whitespace") -> int:
    """Count tokens under a named scheme.

    The default "whitespace" scheme is str.split(), so counts are cheap,
    reproducible, and language-agnostic in the crude sense. Anything fancier
    can be registered by the caller.
    """
    try:
        fn = _TOKEN_SCHEMES[scheme]
    except KeyError:
        known = ", ".join(token_schemes())
        raise ValueError(f"unknown token scheme {scheme!r} (registered: {known})") from None
    return fn(text)


register_token_scheme("whitespace", lambda text: len(text.split()))


# ---------------------------------------------------------------------------
# sentence splitting

_TERMINALS = ".!?。！？"
_CLOSERS = "\"'”’)」』\\]"
_SENT_RE = re.compile(f"([{re.escape(_TERMINALS)}]+)[{_CLOSERS}]*\\s+")
_PARA_RE = re.compile(r"\n[ \t]*\n\s*")
_WORD_BEFORE = re.compile(r"([A-Za-z]+)$")

# Common abbreviations whose trailing period should not end a sentence.
_ABBREVIATIONS = frozenset(
    "mr mrs ms dr prof rev gen col sgt st mt vs etc jr sr no vol fig eg ie cf al inc ltd co dept est approx".split()
)


def _abbreviation_guard(text: str, term_start: int) -> bool:
    """True when the period at term_start ends an abbreviation or an initial."""
    m = _WORD_BEFORE.search(text, max(0, term_start - 24), term_start)
    if m is None or m.end() != term_start:
        return False
    word = m.group(1)
    if len(word) == 1 and word.isupper():
        return True
    return word.lower() in _ABBREVIATIONS


def _boundaries(text: str) -> tuple[set[int], set[int]]:
    """Return (punctuation boundaries, paragraph boundaries) as cut offsets."""
    punct: set[int] = set()
    for m in _SENT_RE.finditer(text):
        if m.group(1) == "." and _abbreviation_guard(text, m.start(1)):
            continue
        punct.add(m.end())
    para = {m.end() for m in _PARA_RE.finditer(text)}
    return punct, para


def _spans_from_cuts(length: int, cuts: Iterable[int]) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    prev = 0
    for cut in sorted(c for c in cuts if 0 < c < length):
        spans.append((prev, cut))
        prev = cut
    if prev < length or not spans:
        spans.append((prev, length))
    return spans


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Split text into sentence spans that tile [0, len(text)) exactly.

    A boundary is sentence-terminal punctuation (with optional closing quotes
    or brackets) followed by whitespace, or a blank line. Periods after common
    abbreviations and single-initial capitals do not split. Trailing
    whitespace stays attached to the preceding sentence, which is what makes
    the spans tile without gaps.
    """
    if not text:
        return []
    punct, para = _boundaries(text)
    return _spans_from_cuts(len(text), punct | para)


# ---------------------------------------------------------------------------
# core record types


@dataclass(frozen=True)
class Document:
    """A source text plus optional chapter cut points (character offsets)."""

    doc_id: str
    text: str
    title: str = ""
    chapter_bounds: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.text:
            raise ValueError(f"document {self.doc_id!r} has empty text")
        bounds = tuple(self.chapter_bounds)
        object.__setattr__(self, "chapter_bounds", bounds)
        for prev, cur in zip((0,) + bounds, bounds):
            if not prev < cur < len(self.text):
                raise ValueError(
                    f"document {self.doc_id!r}: chapter_bounds must be strictly "
                    f"increasing and inside (0, {len(self.text)}), got {bounds}"
                )

    def chapter_of_pos(self, pos: int) -> int:
        """Index of the chapter containing character offset pos."""
        return bisect.bisect_right(self.chapter_bounds, pos)

    @property
    def n_chapters(self) -> int:
        return len(self.chapter_bounds) + 1


@dataclass(frozen=True)
class Segment:
    """A contiguous run of whole sentences from one document."""

    doc_id: str
    ordinal: int
    start: int
    end: int
    token_count: int

    @property
    def chunk_id(self) -> ChunkId:
        return (self.doc_id, self.ordinal)


@dataclass(frozen=True)
class ContextGroup:
    """A fixed-size block of consecutive segments."""

    doc_id: str
    ordinal: int
    member_ordinals: tuple[int, ...]
    start: int
    end: int

    @property
    def group_id(self) -> tuple[str, int]:
        return (self.doc_id, self.ordinal)


@dataclass(frozen=True)
class Chunk:
    """A retrieval unit: one segment's text plus its owning group."""

    chunk_id: ChunkId
    text: str
    group_id: tuple[str, int]


@dataclass(frozen=True)
class ContextWindow:
    """The situating text attached to one chunk when it is embedded."""

    chunk_id: ChunkId
    context_text: str
    source: str  # "group", "annotation-span", or "summary"
    token_count: int
    chunk_offset: int | None = None

    def __post_init__(self) -> None:
        if self.source not in ("group", "annotation-span", "summary"):
            raise ValueError(f"unknown context source {self.source!r}")


@dataclass(frozen=True)
class Annotation:
    """A reader note anchored to a character span of one document."""

    doc_id: str
    note_text: str
    anchor_start: int
    anchor_end: int


@dataclass(frozen=True)
class QueryChunkPair:
    """One query with its gold chunks, their contexts, and negative chunk ids."""

    query_id: str
    query_text: str
    gold_chunk_ids: tuple[ChunkId, ...]
    contexts: tuple[ContextWindow, ...]
    negatives: tuple[ChunkId, ...] = ()
    split: str = "train"
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.gold_chunk_ids:
            raise ValueError(f"pair {self.query_id!r} has no gold chunks")
        if len(self.contexts) != len(self.gold_chunk_ids):
            raise ValueError(
                f"pair {self.query_id!r}: {len(self.contexts)} contexts for "
                f"{len(self.gold_chunk_ids)} golds"
            )
        overlap = set(self.negatives) & set(self.gold_chunk_ids)
        if overlap:
            raise ValueError(f"pair {self.query_id!r}: negatives overlap golds: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# segmentation


def segment_document(
    doc: Document,
    target_tokens: int = DEFAULT_SEGMENT_TOKENS,
    scheme: str = "whitespace",
) -> list[Segment]:
    """Greedily pack whole sentences into segments of about target_tokens.

    A segment closes as soon as it reaches the target, so every segment except
    possibly the last holds at least target_tokens, and none overshoots by
    more than one sentence. Segments never split a sentence and they tile the
    document text exactly.

    A document with no sentence-terminal punctuation at all falls back to one
    segment per hard paragraph break, whatever the token counts come out as.
    """
    if target_tokens < 1:
        raise ValueError(f"target_tokens must be >= 1, got {target_tokens}")
    text = doc.text
    if not any(c in _TERMINALS for c in text):
        _, para = _boundaries(text)
        spans = _spans_from_cuts(len(text), para)
        return [
            Segment(doc.doc_id, i, s, e, count_tokens(text[s:e], scheme))
            for i, (s, e) in enumerate(spans)
        ]

    segments: list[Segment] = []
    seg_start = 0
    running = 0
    spans = sentence_spans(text)
    for s, e in spans:
        running += count_tokens(text[s:e], scheme)
        if running >= target_tokens:
            segments.append(Segment(doc.doc_id, len(segments), seg_start, e, running))
            seg_start = e
            running = 0
    if seg_start < len(text):
        tail = count_tokens(text[seg_start:], scheme)
        segments.append(Segment(doc.doc_id, len(segments), seg_start, len(text), tail))
    return segments


def group_segments(
    segments: Sequence[Segment],
    group_size: int = DEFAULT_GROUP_SIZE,
) -> list[ContextGroup]:
    """Partition a document's segments into consecutive groups of group_size.

    The final group may be short. Input must be one document's segments in
    ordinal order starting at zero.
    """
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    if not segments:
        raise ValueError("cannot group an empty segment list")
    doc_id = segments[0].doc_id
    for i, seg in enumerate(segments):
        if seg.doc_id != doc_id or seg.ordinal != i:
            raise ValueError("segments must come from one document, in ordinal order")
    groups = []
    for g, lo in enumerate(range(0, len(segments), group_size)):
        block = segments[lo : lo + group_size]
        groups.append(
            ContextGroup(
                doc_id=doc_id,
                ordinal=g,
                member_ordinals=tuple(s.ordinal for s in block),
                start=block[0].start,
                end=block[-1].end,
            )
        )
    return groups


# ---------------------------------------------------------------------------
# corpus container


@dataclass
class SegmentedDocument:
    doc: Document
    segments: list[Segment]
    groups: list[ContextGroup]

    @property
    def group_size(self) -> int:
        return len(self.groups[0].member_ordinals) if self.groups else 0


class Corpus:
    """A set of segmented documents with chunk-id based lookup."""

    def __init__(self, entries: Iterable[SegmentedDocument]):
        self.docs: dict[str, SegmentedDocument] = {}
        for entry in entries:
            if entry.doc.doc_id in self.docs:
                raise ValueError(f"duplicate doc_id {entry.doc.doc_id!r}")
            self.docs[entry.doc.doc_id] = entry

    @classmethod
    def build(
        cls,
        documents: Iterable[Document],
        target_tokens: int = DEFAULT_SEGMENT_TOKENS,
        group_size: int = DEFAULT_GROUP_SIZE,
        scheme: str = "whitespace",
    ) -> "Corpus":
        entries = []
        for doc in documents:
            segs = segment_document(doc, target_tokens, scheme)
            entries.append(SegmentedDocument(doc, segs, group_segments(segs, group_size)))
        return cls(entries)

    def __len__(self) -> int:
        return len(self.docs)

    def entry(self, doc_id: str) -> SegmentedDocument:
        try:
            return self.docs[doc_id]
        except KeyError:
            raise KeyError(f"unknown doc_id {doc_id!r}") from None

    def segment(self, chunk_id: ChunkId) -> Segment:
        doc_id, ordinal = chunk_id
        segs = self.entry(doc_id).segments
        if not 0 <= ordinal < len(segs):
            raise KeyError(f"unknown chunk {chunk_id!r}")
        return segs[ordinal]

    def chunk_text(self, chunk_id: ChunkId) -> str:
        seg = self.segment(chunk_id)
        return self.entry(seg.doc_id).doc.text[seg.start : seg.end]

    def chunk(self, chunk_id: ChunkId) -> Chunk:
        entry = self.entry(chunk_id[0])
        seg = self.segment(chunk_id)
        group_ord = seg.ordinal // entry.group_size if entry.group_size else 0
        return Chunk(
            chunk_id=chunk_id,
            text=entry.doc.text[seg.start : seg.end],
            group_id=(seg.doc_id, group_ord),
        )

    def chunk_ids(self, doc_id: str | None = None) -> list[ChunkId]:
        """All chunk ids, sorted by (doc_id, ordinal) for reproducible pools."""
        doc_ids = [doc_id] if doc_id is not None else sorted(self.docs)
        out: list[ChunkId] = []
        for d in doc_ids:
            out.extend(seg.chunk_id for seg in self.entry(d).segments)
        return out

    def iter_chunks(self, doc_id: str | None = None) -> Iterator[Chunk]:
        for cid in self.chunk_ids(doc_id):
            yield self.chunk(cid)

    def chapter_of(self, chunk_id: ChunkId) -> int:
        seg = self.segment(chunk_id)
        return self.entry(seg.doc_id).doc.chapter_of_pos(seg.start)


# ---------------------------------------------------------------------------
# situated contexts


def situated_context_of(
    chunk_id: ChunkId,
    corpus: Corpus,
    multiple: int = DEFAULT_GROUP_SIZE,
    scheme: str = "whitespace",
) -> ContextWindow:
    """Context window for a chunk: the block of `multiple` segments around it.

    The document's segments are partitioned into consecutive blocks of
    `multiple`, and the chunk's block is its context. Block boundaries are
    aligned to ordinal 0, so multiples that divide each other nest exactly and
    the chunk text always appears verbatim inside its window.
    """
    if multiple < 1:
        raise ValueError(f"context multiple must be >= 1, got {multiple}")
    entry = corpus.entry(chunk_id[0])
    seg = corpus.segment(chunk_id)
    lo = (seg.ordinal // multiple) * multiple
    block = entry.segments[lo : lo + multiple]
    start, end = block[0].start, block[-1].end
    context_text = entry.doc.text[start:end]
    return ContextWindow(
        chunk_id=chunk_id,
        context_text=context_text,
        source="group",
        token_count=count_tokens(context_text, scheme),
        chunk_offset=seg.start - start,
    )


def _clip_to_token_cap(text: str, cap: int, scheme: str) -> tuple[str, bool]:
    """Trim whole trailing sentences until the text fits the token cap."""
    total = count_tokens(text, scheme)
    if total <= cap:
        return text, False
    spans = sentence_spans(text)
    running = total
    for i in range(len(spans) - 1, 0, -1):
        running -= count_tokens(text[spans[i][0] : spans[i][1]], scheme)
        end = spans[i][0]
        # Per-span counts add up exactly under the whitespace scheme; other
        # schemes get a defensive recount before we accept the cut.
        if running <= cap and count_tokens(text[:end], scheme) <= cap:
            return text[:end], True
    # Single huge sentence: fall back to a hard token cut.
    words = text.split()
    return " ".join(words[:cap]), True


# ---------------------------------------------------------------------------
# pair construction


def overlapping_chunks(corpus: Corpus, doc_id: str, start: int, end: int) -> list[ChunkId]:
    """Chunk ids whose spans intersect [start, end), in ordinal order."""
    entry = corpus.entry(doc_id)
    if not (0 <= start < end <= len(entry.doc.text)):
        raise ValueError(
            f"anchor [{start}, {end}) is outside document {doc_id!r} "
            f"(length {len(entry.doc.text)}) or empty"
        )
    starts = [seg.start for seg in entry.segments]
    lo = bisect.bisect_right(starts, start) - 1
    out = []
    for seg in entry.segments[max(lo, 0) :]:
        if seg.start >= end:
            break
        if seg.end > start:
            out.append(seg.chunk_id)
    return out


def build_pairs(
    annotations: Sequence[Annotation],
    corpus: Corpus,
    context_source: str = "annotation-span",
    context_multiple: int = DEFAULT_GROUP_SIZE,
    context_cap_tokens: int = DEFAULT_CONTEXT_CAP_TOKENS,
    scheme: str = "whitespace",
    split: str = "train",
    on_invalid: str = "error",
) -> list[QueryChunkPair]:
    """Turn anchored annotations into query-chunk pairs.

    Each annotation's note text becomes the query. Gold chunks are every
    segment the anchor span intersects. Context windows come either from the
    anchor span itself ("annotation-span") or from the chunk's segment block
    ("group"); either way they are clipped to context_cap_tokens by dropping
    whole trailing sentences.

    on_invalid: "error" raises on an anchor outside the document, "skip" logs
    and drops that annotation.
    """
    if context_source not in ("annotation-span", "group"):
        raise ValueError(f"unknown context_source {context_source!r}")
    if on_invalid not in ("error", "skip"):
        raise ValueError(f"on_invalid must be 'error' or 'skip', got {on_invalid!r}")
    pairs = []
    for i, ann in enumerate(annotations):
        try:
            golds = overlapping_chunks(corpus, ann.doc_id, ann.anchor_start, ann.anchor_end)
        except (KeyError, ValueError) as exc:
            if on_invalid == "error":
                raise ValueError(f"annotation {i}: {exc}") from exc
            logger.warning("skipping annotation %d: %s", i, exc)
            continue
        flags: tuple[str, ...] = ()
        contexts = []
        for cid in golds:
            if context_source == "group":
                win = situated_context_of(cid, corpus, context_multiple, scheme)
                clipped, was_clipped = _clip_to_token_cap(win.context_text, context_cap_tokens, scheme)
                if was_clipped:
                    offset = win.chunk_offset if win.chunk_offset < len(clipped) else None
                    win = ContextWindow(cid, clipped, "group", count_tokens(clipped, scheme), offset)
                    flags = flags if "clipped_context" in flags else flags + ("clipped_context",)
            else:
                entry = corpus.entry(ann.doc_id)
                raw = entry.doc.text[ann.anchor_start : ann.anchor_end]
                clipped, was_clipped = _clip_to_token_cap(raw, context_cap_tokens, scheme)
                if was_clipped and "clipped_context" not in flags:
                    flags = flags + ("clipped_context",)
                win = ContextWindow(
                    chunk_id=cid,
                    context_text=clipped,
                    source="annotation-span",
                    token_count=count_tokens(clipped, scheme),
                )
            contexts.append(win)
        pairs.append(
            QueryChunkPair(
                query_id=f"{ann.doc_id}#q{i:06d}",
                query_text=ann.note_text,
                gold_chunk_ids=tuple(golds),
                contexts=tuple(contexts),
                split=split,
                flags=flags,
            )
        )
    return pairs


def sample_negatives(
    pair: QueryChunkPair,
    corpus: Corpus,
    n: int = 10,
    rng_seed: int = 0,
) -> list[ChunkId]:
    """Sample negative chunk ids for one pair, deterministically in rng_seed.

    Negatives come from the gold document's other chapters. When the document
    has fewer than two chapters, they come from outside the golds' segment
    groups instead. If fewer than n candidates exist, all of them are
    returned (callers should flag the pair, see attach_negatives).
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    doc_ids = {cid[0] for cid in pair.gold_chunk_ids}
    if len(doc_ids) != 1:
        raise ValueError(f"pair {pair.query_id!r} spans multiple documents: {sorted(doc_ids)}")
    doc_id = next(iter(doc_ids))
    entry = corpus.entry(doc_id)
    golds = set(pair.gold_chunk_ids)

    if entry.doc.n_chapters >= 2:
        gold_chapters = {corpus.chapter_of(cid) for cid in golds}
        eligible = [
            seg.chunk_id
            for seg in entry.segments
            if entry.doc.chapter_of_pos(seg.start) not in gold_chapters
            and seg.chunk_id not in golds
        ]
    else:
        gsize = entry.group_size or 1
        gold_groups = {cid[1] // gsize for cid in golds}
        eligible = [
            seg.chunk_id
            for seg in entry.segments
            if seg.ordinal // gsize not in gold_groups and seg.chunk_id not in golds
        ]

    if len(eligible) <= n:
        return eligible
    rng = random.Random(stable_seed("negatives", rng_seed, pair.query_id))
    picked = rng.sample(eligible, n)
    return sorted(picked, key=lambda cid: cid[1])


def attach_negatives(
    pair: QueryChunkPair,
    corpus: Corpus,
    n: int = 10,
    rng_seed: int = 0,
) -> QueryChunkPair:
    """Return the pair with sampled negatives, flagging a short supply."""
    negs = sample_negatives(pair, corpus, n, rng_seed)
    flags = pair.flags
    if len(negs) < n and "short_negatives" not in flags:
        logger.warning(
            "pair %s: only %d of %d negatives available", pair.query_id, len(negs), n
        )
        flags = flags + ("short_negatives",)
    return replace(pair, negatives=tuple(negs), flags=flags)


# ---------------------------------------------------------------------------
# JSONL serialization


def write_documents_jsonl(documents: Iterable[Document], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for doc in documents:
            rec = {
                "doc_id": doc.doc_id,
                "title": doc.title,
                "text": doc.text,
                "chapter_bounds": list(doc.chapter_bounds),
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_documents_jsonl(path: str | Path) -> list[Document]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(
                    Document(
                        doc_id=rec["doc_id"],
                        text=rec["text"],
                        title=rec.get("title", ""),
                        chapter_bounds=tuple(rec.get("chapter_bounds", ())),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad document record: {exc}") from exc
    return docs


def write_annotations_jsonl(annotations: Iterable[Annotation], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for ann in annotations:
            rec = {
                "doc_id": ann.doc_id,
                "note_text": ann.note_text,
                "anchor_start": ann.anchor_start,
                "anchor_end": ann.anchor_end,
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_annotations_jsonl(path: str | Path) -> list[Annotation]:
    anns = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                anns.append(
                    Annotation(
                        doc_id=rec["doc_id"],
                        note_text=rec["note_text"],
                        anchor_start=int(rec["anchor_start"]),
                        anchor_end=int(rec["anchor_end"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad annotation record: {exc}") from exc
    return anns


def _context_to_rec(win: ContextWindow) -> dict:
    return {
        "chunk_id": list(win.chunk_id),
        "context_text": win.context_text,
        "source": win.source,
        "token_count": win.token_count,
        "chunk_offset": win.chunk_offset,
    }


def _context_from_rec(rec: dict) -> ContextWindow:
    return ContextWindow(
        chunk_id=(rec["chunk_id"][0], int(rec["chunk_id"][1])),
        context_text=rec["context_text"],
        source=rec["source"],
        token_count=int(rec["token_count"]),
        chunk_offset=rec.get("chunk_offset"),
    )


def write_pairs_jsonl(pairs: Iterable[QueryChunkPair], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            rec = {
                "query_id": pair.query_id,
                "query_text": pair.query_text,
                "gold_chunk_ids": [list(cid) for cid in pair.gold_chunk_ids],
                "contexts": [_context_to_rec(w) for w in pair.contexts],
                "negatives": [list(cid) for cid in pair.negatives],
                "split": pair.split,
                "flags": list(pair.flags),
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_pairs_jsonl(path: str | Path) -> list[QueryChunkPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(
                    QueryChunkPair(
                        query_id=rec["query_id"],
                        query_text=rec["query_text"],
                        gold_chunk_ids=tuple((c[0], int(c[1])) for c in rec["gold_chunk_ids"]),
                        contexts=tuple(_context_from_rec(w) for w in rec["contexts"]),
                        negatives=tuple((c[0], int(c[1])) for c in rec.get("negatives", ())),
                        split=rec.get("split", "train"),
                        flags=tuple(rec.get("flags", ())),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{line_no}: bad pair record: {exc}") from exc
    return pairs


def write_segments_jsonl(corpus: Corpus, path: str | Path) -> int:
    """Persist segmentation (one record per document) for manifest pipelines."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for doc_id in sorted(corpus.docs):
            entry = corpus.docs[doc_id]
            rec = {
                "doc_id": doc_id,
                "segments": [
                    {"ordinal": s.ordinal, "start": s.start, "end": s.end, "token_count": s.token_count}
                    for s in entry.segments
                ],
                "groups": [
                    {
                        "ordinal": g.ordinal,
                        "member_ordinals": list(g.member_ordinals),
                        "start": g.start,
                        "end": g.end,
                    }
                    for g in entry.groups
                ],
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_segments_jsonl(path: str | Path, documents: Sequence[Document]) -> Corpus:
    """Rebuild a Corpus from persisted segmentation plus the source documents."""
    by_id = {d.doc_id: d for d in documents}
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = by_id[rec["doc_id"]]
                segs = [
                    Segment(doc.doc_id, int(s["ordinal"]), int(s["start"]), int(s["end"]), int(s["token_count"]))
                    for s in rec["segments"]
                ]
                groups = [
                    ContextGroup(
                        doc.doc_id,
                        int(g["ordinal"]),
                        tuple(int(o) for o in g["member_ordinals"]),
                        int(g["start"]),
                        int(g["end"]),
                    )
                    for g in rec["groups"]
                ]
                entries.append(SegmentedDocument(doc, segs, groups))
            except KeyError as exc:
                raise ValueError(f"{path}:{line_no}: segment record references unknown data: {exc}") from exc
    return Corpus(entries)
