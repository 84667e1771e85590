"""
How wide should the situated context be?
========================================

The residual tower reads the chunk inside a window of surrounding
segments. This script trains once and then re-evaluates the same queries
under windows of 4, 8, 16, 32, and 64 segments, printing recall and the
actual window sizes in tokens.

The flat middle of the resulting table is the point: retrieval quality
should not hinge on nailing one magic window size. The widest setting
dips, which is honest physics: once the window is many scenes wide, the
context says less about this chunk in particular.
"""

from dataclasses import replace

from sitemb.corpus import Corpus, attach_negatives, build_pairs, situated_context_of
from sitemb.encoding import init_params
from sitemb.evaluation import SyntheticSpec, context_length_sweep, gen_synthetic
from sitemb.residual import ComposedEmbedder, TrainingConfig, train_base, train_residual

# Same recipe as train_and_compare.py, condensed.
spec = SyntheticSpec(
    n_docs=1, entities_per_doc=12, sentences_per_entity=16, ambiguity_rate=0.8, seed=11
)
documents, annotations, _ = gen_synthetic(spec)
documents = [replace(d, chapter_bounds=()) for d in documents]
corpus = Corpus.build(documents, target_tokens=12, group_size=4)
pairs = build_pairs(annotations, corpus, context_source="group", context_multiple=4)
pairs = [attach_negatives(p, corpus, n=20, rng_seed=3) for p in pairs]

FEATURE_DIM, EMBED_DIM = 2048, 256
base = train_base(
    pairs,
    corpus,
    TrainingConfig(lr=0.5, max_steps=120, negatives_per_query=20, seed=1),
    feature_dim=FEATURE_DIM,
    embed_dim=EMBED_DIM,
).params
residual = train_residual(
    pairs,
    corpus,
    base,
    TrainingConfig(lr=0.5, max_steps=120, negatives_per_query=20, seed=1, margin=1.0),
    init=init_params(FEATURE_DIM, EMBED_DIM, seed=2, scale=0.02),
).params
composed = ComposedEmbedder(base, residual)

# ---------------------------------------------------------------------------
# One evaluation per window width. The embedder is fixed; only the context
# handed to it changes.

multiples = (4, 8, 16, 32, 64)
reports = context_length_sweep(composed, pairs, corpus, multiples=multiples, ks=(10,))

sample_chunk = corpus.chunk_ids()[len(corpus.chunk_ids()) // 2]
print(f"{'segments':>9s} {'window tokens':>14s} {'recall@10':>10s}")
for multiple, report in zip(multiples, reports):
    window = situated_context_of(sample_chunk, corpus, multiple)
    print(f"{multiple:9d} {window.token_count:14d} {report.aggregates['recall@10']:10.3f}")
