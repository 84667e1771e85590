"""
Train both towers and watch context resolve ambiguous chunks
============================================================

A chunk-only encoder cannot tell apart sentences that are word-for-word
identical, and long documents are full of those: "She signed the ledger"
means a different ledger in every chapter. This script builds a corpus
designed around that failure, trains the chunk-only tower, trains a
situated residual on top of it, and compares retrieval before and after.

Runs on CPU in well under a minute.
"""

from dataclasses import replace

from sitemb.corpus import Corpus, attach_negatives, build_pairs
from sitemb.encoding import init_params
from sitemb.evaluation import SyntheticSpec, evaluate_pairs, gen_synthetic
from sitemb.index import build_index, query_topk
from sitemb.residual import (
    ComposedEmbedder,
    SingleEncoderEmbedder,
    TrainingConfig,
    train_base,
    train_residual,
)

# ---------------------------------------------------------------------------
# A corpus where the gold sentence is usually a pronoun. Twelve named
# entities each carry four facts; 80% of the fact sentences say "It ..."
# instead of naming their entity, so the sentence alone cannot identify
# which thread it belongs to. Only the surrounding scene can.

spec = SyntheticSpec(
    n_docs=1,
    entities_per_doc=12,
    sentences_per_entity=16,
    ambiguity_rate=0.8,
    seed=11,
)
documents, annotations, info = gen_synthetic(spec)
documents = [replace(d, chapter_bounds=()) for d in documents]

corpus = Corpus.build(documents, target_tokens=12, group_size=4)
print(f"{len(corpus.chunk_ids())} chunks, {len(annotations)} queries")

# Each annotation names its entity AND its fact, so every query is
# answerable, just not from the chunk text alone.
pairs = build_pairs(annotations, corpus, context_source="group", context_multiple=4)
pairs = [attach_negatives(p, corpus, n=20, rng_seed=3) for p in pairs]

# ---------------------------------------------------------------------------
# Stage 1: the chunk-only tower. It sees bare chunk text and learns
# whatever the words can carry.

FEATURE_DIM, EMBED_DIM = 2048, 256

base_cfg = TrainingConfig(lr=0.5, max_steps=120, negatives_per_query=20, seed=1)
base = train_base(
    pairs, corpus, base_cfg, feature_dim=FEATURE_DIM, embed_dim=EMBED_DIM
).params

# ---------------------------------------------------------------------------
# Stage 2: the residual tower. The base stays frozen; the new tower sees
# the chunk rendered together with its scene and only has to learn the
# difference between what the scene says and what the chunk already said.
# A wider margin keeps its gradients alive, and a small init keeps the
# untrained residual from drowning the base.

residual_cfg = TrainingConfig(
    lr=0.5, max_steps=120, negatives_per_query=20, seed=1, margin=1.0
)
residual = train_residual(
    pairs,
    corpus,
    base,
    residual_cfg,
    init=init_params(FEATURE_DIM, EMBED_DIM, seed=2, scale=0.02),
).params

# ---------------------------------------------------------------------------
# Side-by-side retrieval quality. The composed embedding is simply the sum
# of the two towers' unit vectors, scored by cosine.

chunk_only = SingleEncoderEmbedder(base)
composed = ComposedEmbedder(base, residual)

for name, embedder in (("chunk-only", chunk_only), ("composed", composed)):
    report = evaluate_pairs(embedder, pairs, corpus, ks=(1, 10), context_multiple=4)
    agg = report.aggregates
    print(f"{name:10s}  recall@1 {agg['recall@1']:.3f}   recall@10 {agg['recall@10']:.3f}")

# On the pinned seed this prints roughly 0.21 -> 0.44 at recall@1: the
# residual nearly doubles first-hit accuracy, because it disambiguates the
# pronominal chunks the base can only tie-break blindly.

# ---------------------------------------------------------------------------
# Look at one rescued query up close.

from sitemb.corpus import situated_context_of

ids = corpus.chunk_ids()
texts = [corpus.chunk_text(cid) for cid in ids]
contexts = [situated_context_of(cid, corpus, 4).context_text for cid in ids]

index_base = build_index(list(zip(ids, chunk_only.embed_chunks(texts))))
index_comp = build_index(list(zip(ids, composed.embed_chunks(texts, contexts))))

for pair in pairs:
    gold = set(pair.gold_chunk_ids)
    top_base = query_topk(index_base, chunk_only.embed_queries([pair.query_text])[0], 1).ids[0]
    top_comp = query_topk(index_comp, composed.embed_queries([pair.query_text])[0], 1).ids[0]
    if top_base not in gold and top_comp in gold:
        print()
        print(f"query:          {pair.query_text!r}")
        print(f"gold chunk:     {corpus.chunk_text(top_comp)!r}")
        print(f"chunk-only got: {corpus.chunk_text(top_base)!r}")
        print("same words, wrong thread; the situated residual reads the scene.")
        break
