"""Retrieval metrics, experiment sweeps, and the synthetic corpus generator.

Everything here reduces to one shape: rank a candidate pool for each query,
record where the gold chunks landed, and aggregate. Reports keep the
per-query rows so every aggregate can be recomputed from scratch, and carry a
config fingerprint sufficient to reproduce the run.

The synthetic generator builds documents out of entity "threads": rotating
scenes in which a named character states one fact per scene. At a given
ambiguity rate the fact sentence uses a pronoun instead of the name, so the
chunk alone cannot say whose fact it is; the surrounding scene always can.
That is the desk-scale stand-in for context-dependent book annotations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import (
    Annotation,
    ChunkId,
    Corpus,
    Document,
    QueryChunkPair,
    build_pairs,
    situated_context_of,
    write_annotations_jsonl,
    write_documents_jsonl,
)
from .index import build_index, query_topk
from .util import canonical_json, stable_digest

logger = logging.getLogger(__name__)

RECALL_MODES = ("any-hit", "coverage")
DEFAULT_KS = (10, 20, 50)
DEFAULT_PRF_K = 5
CONTEXT_SWEEP_MULTIPLES = (4, 8, 16, 32, 64)


# ---------------------------------------------------------------------------
# point metrics


def _ranked_ids(result) -> Sequence[ChunkId]:
    ids = getattr(result, "ids", result)
    return list(ids)


def recall_at_k(result, golds, k: int, mode: str = "any-hit") -> float:
    """Recall of a single ranked result against its gold set.

    any-hit: 1.0 if any gold appears in the top k, else 0.0.
    coverage: fraction of golds appearing in the top k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if mode not in RECALL_MODES:
        raise ValueError(f"mode must be one of {RECALL_MODES}, got {mode!r}")
    golds = set(golds)
    if not golds:
        raise ValueError("golds must be non-empty")
    ids = _ranked_ids(result)
    if not ids:
        raise ValueError("empty result")
    hits = golds.intersection(ids[:k])
    if mode == "any-hit":
        return 1.0 if hits else 0.0
    return len(hits) / len(golds)


def prf_at_k(result, gold_set, k: int = DEFAULT_PRF_K) -> tuple[float, float, float]:
    """Precision, recall, and F1 of the top k against a gold set.

    precision = hits/k, recall = hits/|golds|, f1 their harmonic mean with
    the 0/0 case defined as 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gold_set = set(gold_set)
    if not gold_set:
        raise ValueError("gold set must be non-empty")
    ids = _ranked_ids(result)
    hits = len(gold_set.intersection(ids[:k]))
    precision = hits / k
    recall = hits / len(gold_set)
    f1 = 0.0 if precision + recall == 0.0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class QueryOutcome:
    """Where one query's golds landed in its candidate pool."""

    query_id: str
    gold_ids: tuple[ChunkId, ...]
    gold_ranks: tuple[int | None, ...]
    pool_size: int
    returned_tokens: int | None = None

    def best_rank(self) -> int | None:
        ranks = [r for r in self.gold_ranks if r is not None]
        return min(ranks) if ranks else None


def recompute_aggregates(
    rows: Sequence[QueryOutcome],
    ks: Sequence[int] = DEFAULT_KS,
    prf_k: int = DEFAULT_PRF_K,
) -> dict[str, float]:
    """Corpus-level metrics from per-query rows; the one true aggregation."""
    if not rows:
        raise ValueError("no rows to aggregate")
    agg: dict[str, float] = {}
    n = len(rows)
    for k in ks:
        any_hit = 0.0
        coverage = 0.0
        for row in rows:
            inside = sum(1 for r in row.gold_ranks if r is not None and r <= k)
            any_hit += 1.0 if inside else 0.0
            coverage += inside / len(row.gold_ids)
        agg[f"recall@{k}"] = any_hit / n
        agg[f"coverage@{k}"] = coverage / n
    p_sum = r_sum = f_sum = 0.0
    for row in rows:
        hits = sum(1 for r in row.gold_ranks if r is not None and r <= prf_k)
        p = hits / prf_k
        r = hits / len(row.gold_ids)
        f = 0.0 if p + r == 0.0 else 2 * p * r / (p + r)
        p_sum, r_sum, f_sum = p_sum + p, r_sum + r, f_sum + f
    agg[f"precision@{prf_k}"] = p_sum / n
    agg[f"set_recall@{prf_k}"] = r_sum / n
    agg[f"f1@{prf_k}"] = f_sum / n
    return agg


@dataclass
class EvalReport:
    """Per-query outcomes plus aggregates and the config that produced them."""

    task_id: str
    rows: tuple[QueryOutcome, ...]
    ks: tuple[int, ...] = DEFAULT_KS
    prf_k: int = DEFAULT_PRF_K
    axes: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rows = tuple(self.rows)
        self.ks = tuple(self.ks)
        if not self.aggregates:
            self.aggregates = recompute_aggregates(self.rows, self.ks, self.prf_k)
        for key, value in self.aggregates.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"aggregate {key} out of range: {value}")

    @property
    def fingerprint(self) -> str:
        return stable_digest(canonical_json(self.config)).hex()[:16]

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "ks": list(self.ks),
            "prf_k": self.prf_k,
            "axes": self.axes,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "aggregates": self.aggregates,
            "rows": [
                {
                    "query_id": r.query_id,
                    "gold_ids": [[d, o] for d, o in r.gold_ids],
                    "gold_ranks": list(r.gold_ranks),
                    "pool_size": r.pool_size,
                    "returned_tokens": r.returned_tokens,
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "EvalReport":
        rows = tuple(
            QueryOutcome(
                query_id=r["query_id"],
                gold_ids=tuple((d, o) for d, o in r["gold_ids"]),
                gold_ranks=tuple(r["gold_ranks"]),
                pool_size=r["pool_size"],
                returned_tokens=r.get("returned_tokens"),
            )
            for r in payload["rows"]
        )
        return cls(
            task_id=payload["task_id"],
            rows=rows,
            ks=tuple(payload["ks"]),
            prf_k=payload["prf_k"],
            axes=dict(payload.get("axes", {})),
            config=dict(payload.get("config", {})),
            aggregates=dict(payload["aggregates"]),
        )


def write_report_json(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_report_json(path: str | Path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        return EvalReport.from_json_dict(json.load(f))


def write_sweep_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    """One row per sweep cell: axes columns then metric columns."""
    if not reports:
        raise ValueError("no reports to write")
    axis_keys = sorted({k for r in reports for k in r.axes})
    metric_keys = sorted({k for r in reports for k in r.aggregates})
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(axis_keys + metric_keys)
        for r in reports:
            writer.writerow(
                [r.axes.get(k, "") for k in axis_keys]
                + [f"{r.aggregates[k]:.6f}" if k in r.aggregates else "" for k in metric_keys]
            )


def write_sweep_tsv(
    reports: Sequence[EvalReport],
    path: str | Path,
    x_axis: str,
    y_metric: str,
) -> None:
    """Plot-ready two-column TSV: x from the axes, y from the aggregates."""
    if not reports:
        raise ValueError("no reports to write")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{x_axis}\t{y_metric}\n")
        for r in reports:
            if x_axis not in r.axes:
                raise KeyError(f"report axes lack {x_axis!r}: {sorted(r.axes)}")
            if y_metric not in r.aggregates:
                raise KeyError(f"report lacks metric {y_metric!r}: {sorted(r.aggregates)}")
            f.write(f"{r.axes[x_axis]}\t{r.aggregates[y_metric]:.6f}\n")


# ---------------------------------------------------------------------------
# pool ranking


def _doc_rankings(
    embedder,
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    context_multiple: int,
) -> list[tuple[QueryChunkPair, tuple[ChunkId, ...]]]:
    """Full candidate ranking for each pair within its gold document's pool.

    Chunks are embedded once per document; queries are batched per document.
    Results come back in the original pair order.
    """
    by_doc: dict[str, list[int]] = {}
    for i, pair in enumerate(pairs):
        docs = {cid[0] for cid in pair.gold_chunk_ids}
        if len(docs) != 1:
            raise ValueError(f"pair {pair.query_id!r} spans multiple documents")
        by_doc.setdefault(next(iter(docs)), []).append(i)

    out: list[tuple[QueryChunkPair, tuple[ChunkId, ...]] | None] = [None] * len(pairs)
    for doc_id, pair_idx in by_doc.items():
        ids = corpus.chunk_ids(doc_id)
        texts = [corpus.chunk_text(cid) for cid in ids]
        if getattr(embedder, "needs_context", False):
            contexts = [
                situated_context_of(cid, corpus, context_multiple).context_text for cid in ids
            ]
            vectors = embedder.embed_chunks(texts, contexts)
        else:
            vectors = embedder.embed_chunks(texts)
        pool = build_index(list(zip(ids, vectors)))
        queries = embedder.embed_queries([pairs[i].query_text for i in pair_idx])
        for row, i in enumerate(pair_idx):
            result = query_topk(pool, queries[row], len(ids))
            out[i] = (pairs[i], result.ids)
    return [entry for entry in out if entry is not None]


def _outcome(pair: QueryChunkPair, ranked: tuple[ChunkId, ...], returned_tokens=None) -> QueryOutcome:
    position = {cid: i + 1 for i, cid in enumerate(ranked)}
    return QueryOutcome(
        query_id=pair.query_id,
        gold_ids=pair.gold_chunk_ids,
        gold_ranks=tuple(position.get(cid) for cid in pair.gold_chunk_ids),
        pool_size=len(ranked),
        returned_tokens=returned_tokens,
    )


def evaluate_pairs(
    embedder,
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    ks: Sequence[int] = DEFAULT_KS,
    context_multiple: int = 16,
    prf_k: int = DEFAULT_PRF_K,
    task_id: str = "eval",
    config: Mapping | None = None,
    axes: Mapping | None = None,
) -> EvalReport:
    """Rank every pair's document pool and report recall/precision metrics."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    rows = [
        _outcome(pair, ranked)
        for pair, ranked in _doc_rankings(embedder, pairs, corpus, context_multiple)
    ]
    full_config = {
        "embedder": embedder.fingerprint(),
        "context_multiple": context_multiple,
        "ks": list(ks),
        "prf_k": prf_k,
        "n_pairs": len(pairs),
    }
    if config:
        full_config.update(config)
    return EvalReport(
        task_id=task_id,
        rows=tuple(rows),
        ks=tuple(ks),
        prf_k=prf_k,
        axes=dict(axes or {}),
        config=full_config,
    )


# ---------------------------------------------------------------------------
# sweeps


def fixed_budget_sweep(
    documents: Sequence[Document],
    annotations: Sequence[Annotation],
    embedder,
    budget_tokens: int,
    chunk_sizes: Sequence[int],
    context_multiple: int = 16,
    scheme: str = "whitespace",
    task_id: str = "sweep-budget",
    config: Mapping | None = None,
) -> list[EvalReport]:
    """Re-segment at each chunk size and retrieve k = budget // size chunks.

    One report per chunk size. Rows carry the recounted token total of the
    returned chunks so the budget can be audited downstream.
    """
    if not chunk_sizes:
        raise ValueError("no chunk sizes given")
    if budget_tokens < max(chunk_sizes):
        raise ValueError(
            f"budget {budget_tokens} is below the largest chunk size {max(chunk_sizes)}"
        )
    reports = []
    for size in chunk_sizes:
        k = budget_tokens // size
        if k == 0:
            raise ValueError(f"budget {budget_tokens} returns zero chunks at size {size}")
        corpus = Corpus.build(documents, target_tokens=size, scheme=scheme)
        pairs = build_pairs(
            annotations,
            corpus,
            context_source="group",
            context_multiple=context_multiple,
            scheme=scheme,
        )
        rows = []
        for pair, ranked in _doc_rankings(embedder, pairs, corpus, context_multiple):
            returned = sum(corpus.segment(cid).token_count for cid in ranked[:k])
            rows.append(_outcome(pair, ranked, returned_tokens=returned))
        cell_config = {
            "embedder": embedder.fingerprint(),
            "budget_tokens": budget_tokens,
            "chunk_size": size,
            "k": k,
            "context_multiple": context_multiple,
            "scheme": scheme,
        }
        if config:
            cell_config.update(config)
        reports.append(
            EvalReport(
                task_id=task_id,
                rows=tuple(rows),
                ks=(k,),
                prf_k=min(k, DEFAULT_PRF_K),
                axes={"budget_tokens": budget_tokens, "chunk_size": size, "k": k},
                config=cell_config,
            )
        )
    return reports


def context_length_sweep(
    embedder,
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    multiples: Sequence[int] = CONTEXT_SWEEP_MULTIPLES,
    ks: Sequence[int] = DEFAULT_KS,
    task_id: str = "sweep-context",
    config: Mapping | None = None,
) -> list[EvalReport]:
    """Evaluate the same pairs under increasingly wide situated contexts."""
    if not getattr(embedder, "needs_context", False):
        raise ValueError("context sweep needs an embedder with situated inputs")
    if not multiples:
        raise ValueError("no context multiples given")
    reports = []
    for m in multiples:
        reports.append(
            evaluate_pairs(
                embedder,
                pairs,
                corpus,
                ks=ks,
                context_multiple=m,
                task_id=task_id,
                config=dict(config or {}),
                axes={"context_multiple": m},
            )
        )
    return reports


# ---------------------------------------------------------------------------
# synthetic corpus generation

SCENE_SENTENCES = 4
TOKENS_PER_SENTENCE = 12

_VERBS = (
    "carried", "polished", "buried", "traded", "mended", "guarded", "copied",
    "weighed", "painted", "sharpened", "counted", "wrapped", "borrowed",
    "hid", "sketched", "tuned", "stitched", "cleaned", "sold", "found",
    "lifted", "repaired", "labeled", "archived", "balanced", "brewed",
    "carved", "folded", "greased", "hauled",
)
_ADJECTIVES = (
    "silver", "crooked", "faded", "heavy", "hollow", "narrow", "ancient",
    "broken", "gilded", "rusted", "smooth", "woven", "painted", "marbled",
    "cracked", "polished", "braided", "frosted", "inked", "knotted",
    "lacquered", "mottled", "oiled", "pleated", "quilted", "ribbed",
    "sanded", "tarnished", "veined", "waxed",
)
_NOUNS = (
    "lantern", "ledger", "compass", "bellows", "spindle", "chisel", "goblet",
    "saddle", "anvil", "locket", "barrel", "mirror", "fiddle", "kettle",
    "plough", "quiver", "sundial", "tapestry", "urn", "whistle", "yoke",
    "abacus", "banner", "cauldron", "dagger", "easel", "flute", "gavel",
    "hammock", "inkwell",
)
_FILLER = (
    "the", "old", "grey", "road", "wound", "past", "mill", "quiet", "rain",
    "fell", "over", "fields", "long", "evening", "light", "faded", "slow",
    "wind", "moved", "through", "tall", "reeds", "near", "river", "bend",
    "dust", "settled", "on", "beams", "while", "bells", "rang", "far",
)
_PLACES = ("hall", "orchard", "harbor", "archive", "garret", "cellar", "chapel", "market")


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated corpus of entity threads."""

    n_docs: int = 1
    entities_per_doc: int = 4
    sentences_per_entity: int = 16
    ambiguity_rate: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_docs < 1:
            raise ValueError(f"n_docs must be >= 1, got {self.n_docs}")
        if self.entities_per_doc < 1:
            raise ValueError(f"entities_per_doc must be >= 1, got {self.entities_per_doc}")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError(f"ambiguity_rate must be in [0, 1], got {self.ambiguity_rate}")
        if self.sentences_per_entity < SCENE_SENTENCES:
            raise ValueError(
                "infeasible spec: each entity thread needs at least "
                f"{SCENE_SENTENCES} sentences, got {self.sentences_per_entity}"
            )
        if self.sentences_per_entity % SCENE_SENTENCES != 0:
            raise ValueError(
                "infeasible spec: sentences_per_entity must be a multiple of "
                f"{SCENE_SENTENCES}, got {self.sentences_per_entity}"
            )

    @property
    def facts_per_entity(self) -> int:
        return self.sentences_per_entity // SCENE_SENTENCES

    @property
    def class_size(self) -> int:
        """How many chunks state the same fact (one per entity)."""
        return self.entities_per_doc

    @property
    def queries_per_doc(self) -> int:
        return self.entities_per_doc * self.facts_per_entity


def _entity_name(doc: int, e: int) -> str:
    return f"hero{doc}x{e}"


def _pad_words(rng, n: int) -> list[str]:
    return [rng.choice(_FILLER) for _ in range(n)]


def _sentence(words: list[str]) -> str:
    assert len(words) == TOKENS_PER_SENTENCE
    return " ".join(words[:-1]) + " " + words[-1] + "."


def _fact_triplet(fact: int) -> tuple[str, str, str]:
    return (
        _VERBS[fact % len(_VERBS)],
        _ADJECTIVES[fact % len(_ADJECTIVES)],
        _NOUNS[fact % len(_NOUNS)],
    )


def gen_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[Document], list[Annotation], dict]:
    """Generate documents, anchored annotations, and generator bookkeeping.

    Documents interleave entity scenes round-robin: block b holds one scene
    per entity, each stating fact b. The scene opener always names the
    entity; the fact sentence uses a pronoun with probability ambiguity_rate,
    in which case the fact sentence is identical across entities. Chapter
    bounds separate blocks. The info dict records, per annotation, which
    entity and fact it targets and whether the gold chunk is pronominal.
    """
    if spec.facts_per_entity > len(_VERBS):
        raise ValueError(
            f"infeasible spec: at most {len(_VERBS)} distinct facts per entity, "
            f"got {spec.facts_per_entity}"
        )
    rng = np.random.default_rng(spec.seed)

    documents: list[Document] = []
    annotations: list[Annotation] = []
    query_info: list[dict] = []

    for d in range(spec.n_docs):
        sentences: list[str] = []
        # fact sentence word lists are fixed per class so that pronominal
        # versions are exactly identical across entities
        class_pads = {
            f: [str(w) for w in rng.choice(_FILLER, size=6)]
            for f in range(spec.facts_per_entity)
        }
        fact_spans: dict[tuple[int, int], int] = {}
        pronominal: dict[tuple[int, int], bool] = {}

        for block in range(spec.facts_per_entity):
            for e in range(spec.entities_per_doc):
                name = _entity_name(d, e)
                verb, adj, noun = _fact_triplet(block)
                place = _PLACES[(block + e) % len(_PLACES)]
                opener = [name, "came", "to", "the", place, "as"] + [
                    str(w) for w in rng.choice(_FILLER, size=5)
                ]
                ambiguous = bool(rng.random() < spec.ambiguity_rate)
                subject = "they" if ambiguous else name
                fact_words = [subject, verb, "the", adj, noun] + list(class_pads[block])
                closer_a = [str(w) for w in rng.choice(_FILLER, size=TOKENS_PER_SENTENCE)]
                closer_b = [str(w) for w in rng.choice(_FILLER, size=TOKENS_PER_SENTENCE)]
                scene = [
                    _sentence(opener + ["then"] * (TOKENS_PER_SENTENCE - len(opener) - 1) + ["soon"]),
                    _sentence(closer_a),
                    _sentence(fact_words + ["again"] * (TOKENS_PER_SENTENCE - len(fact_words))),
                    _sentence(closer_b),
                ]
                fact_spans[(e, block)] = len(sentences) + 2
                pronominal[(e, block)] = ambiguous
                sentences.extend(scene)

        # character offsets of each sentence, then chapter bounds per block
        text_parts: list[str] = []
        offsets: list[tuple[int, int]] = []
        cursor = 0
        for i, s in enumerate(sentences):
            if i:
                text_parts.append(" ")
                cursor += 1
            offsets.append((cursor, cursor + len(s)))
            text_parts.append(s)
            cursor += len(s)
        text = "".join(text_parts)
        block_len = spec.entities_per_doc * SCENE_SENTENCES
        bounds = tuple(
            offsets[b * block_len][0] for b in range(1, spec.facts_per_entity)
        )
        doc_id = f"synth-{spec.seed}-{d:02d}"
        documents.append(Document(doc_id=doc_id, text=text, chapter_bounds=bounds))

        for e in range(spec.entities_per_doc):
            name = _entity_name(d, e)
            for f in range(spec.facts_per_entity):
                verb, adj, noun = _fact_triplet(f)
                sent_idx = fact_spans[(e, f)]
                start, end = offsets[sent_idx]
                note = f"{name} {verb} {adj} {noun}"
                annotations.append(Annotation(doc_id, note, start, end))
                query_info.append(
                    {
                        "doc_id": doc_id,
                        "entity": e,
                        "fact": f,
                        "ambiguous": pronominal[(e, f)],
                    }
                )

    info = {
        "class_size": spec.class_size,
        "tokens_per_sentence": TOKENS_PER_SENTENCE,
        "scene_sentences": SCENE_SENTENCES,
        "n_ambiguous": sum(1 for q in query_info if q["ambiguous"]),
        "queries": query_info,
    }
    return documents, annotations, info


def write_synthetic(
    spec: SyntheticSpec,
    documents_path: str | Path,
    annotations_path: str | Path,
) -> dict:
    """Generate and persist a synthetic corpus; returns the info dict."""
    documents, annotations, info = gen_synthetic(spec)
    write_documents_jsonl(documents, documents_path)
    write_annotations_jsonl(annotations, annotations_path)
    return info
