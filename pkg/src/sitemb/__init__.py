"""sitemb: situated chunk embeddings for retrieval over long documents.

The package covers the full loop: segmenting documents into chunks, attaching
the surrounding context each chunk is embedded with, training a residual
encoder that adds context awareness on top of a frozen base encoder, exact
cosine retrieval, and evaluation harnesses including a synthetic
context-dependent corpus generator.
"""

from .corpus import (
    Annotation,
    Chunk,
    ChunkId,
    ContextGroup,
    ContextWindow,
    Corpus,
    Document,
    QueryChunkPair,
    Segment,
    SegmentedDocument,
    attach_negatives,
    build_pairs,
    count_tokens,
    group_segments,
    register_token_scheme,
    sample_negatives,
    segment_document,
    sentence_spans,
    situated_context_of,
)
from .encoding import (
    BridgeClient,
    BridgeError,
    EncoderInput,
    EncoderParams,
    assemble_input,
    bridge_encode,
    encode_texts,
    featurize_texts,
    init_params,
    normalize_rows,
    template_ids,
    toy_encode,
    zero_params,
)
from .evaluation import (
    EvalReport,
    QueryOutcome,
    SyntheticSpec,
    context_length_sweep,
    evaluate_pairs,
    fixed_budget_sweep,
    gen_synthetic,
    prf_at_k,
    recall_at_k,
    recompute_aggregates,
    write_synthetic,
)
from .index import (
    RetrievalResult,
    VectorIndex,
    build_index,
    load_index,
    query_topk,
    save_index,
)
from .residual import (
    ComposedEmbedder,
    CoTrainedEmbedder,
    MarginData,
    SingleEncoderEmbedder,
    TrainingConfig,
    TrainResult,
    co_training_loss,
    compose,
    gradient,
    load_checkpoint,
    margin_loss,
    prepare_co_training_data,
    prepare_margin_data,
    save_checkpoint,
    similarity,
    train_base,
    train_cotrained,
    train_residual,
)

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "BridgeClient",
    "BridgeError",
    "Chunk",
    "ChunkId",
    "ComposedEmbedder",
    "CoTrainedEmbedder",
    "ContextGroup",
    "ContextWindow",
    "Corpus",
    "Document",
    "EncoderInput",
    "EncoderParams",
    "EvalReport",
    "MarginData",
    "QueryChunkPair",
    "QueryOutcome",
    "RetrievalResult",
    "Segment",
    "SegmentedDocument",
    "SingleEncoderEmbedder",
    "SyntheticSpec",
    "TrainResult",
    "TrainingConfig",
    "VectorIndex",
    "assemble_input",
    "attach_negatives",
    "bridge_encode",
    "build_index",
    "build_pairs",
    "co_training_loss",
    "compose",
    "context_length_sweep",
    "count_tokens",
    "encode_texts",
    "evaluate_pairs",
    "featurize_texts",
    "fixed_budget_sweep",
    "gen_synthetic",
    "gradient",
    "group_segments",
    "init_params",
    "load_checkpoint",
    "load_index",
    "margin_loss",
    "normalize_rows",
    "prepare_co_training_data",
    "prepare_margin_data",
    "prf_at_k",
    "query_topk",
    "recall_at_k",
    "recompute_aggregates",
    "register_token_scheme",
    "sample_negatives",
    "save_checkpoint",
    "save_index",
    "segment_document",
    "sentence_spans",
    "similarity",
    "situated_context_of",
    "template_ids",
    "toy_encode",
    "train_base",
    "train_cotrained",
    "train_residual",
    "write_synthetic",
    "zero_params",
    "__version__",
]
