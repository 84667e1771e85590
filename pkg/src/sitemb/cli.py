"""Command line driver for the retrieval pipeline.

Every subcommand reads input artifacts, writes output artifacts, and drops a
JSON manifest recording the resolved configuration plus SHA-256 hashes of all
files touched. Reruns from the same manifest reproduce the same artifact
bytes. Failures print one machine-readable JSON line on stderr and exit
nonzero.

Flags use long names only. A ``--config`` file holds ``key = value`` lines
that fill in unset flags; ``--from-manifest`` replays the configuration of an
earlier run. Precedence: explicit flag, then config file, then manifest, then
the built-in default.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .corpus import (
    Annotation,
    Corpus,
    Document,
    attach_negatives,
    build_pairs,
    read_annotations_jsonl,
    read_documents_jsonl,
    read_pairs_jsonl,
    situated_context_of,
    write_documents_jsonl,
    write_pairs_jsonl,
    write_segments_jsonl,
)
from .encoding import (
    DEFAULT_EMBED_DIM,
    DEFAULT_FEATURE_DIM,
    assemble_input,
    bridge_encode,
    template_ids,
)
from .evaluation import (
    DEFAULT_KS,
    DEFAULT_PRF_K,
    CONTEXT_SWEEP_MULTIPLES,
    SyntheticSpec,
    context_length_sweep,
    evaluate_pairs,
    fixed_budget_sweep,
    write_report_json,
    write_sweep_csv,
    write_sweep_tsv,
    write_synthetic,
)
from .index import build_index, load_index, query_topk, save_index
from .residual import (
    ComposedEmbedder,
    CoTrainedEmbedder,
    SingleEncoderEmbedder,
    TrainingConfig,
    load_checkpoint,
    save_checkpoint,
    train_base,
    train_residual,
    write_training_log,
)
from .util import canonical_json, sha256_file

ENCODER_URL_ENV = "SITEMB_ENCODER_URL"

EMBED_MODES = ("chunk-only", "composed", "co-trained")


class CliError(Exception):
    """Invalid invocation or input; maps to exit code 2."""


# --------------------------------------------------------------------------
# option plumbing


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _ints(s) -> tuple[int, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    vals = tuple(int(part) for part in str(s).split(",") if part.strip())
    if not vals:
        raise ValueError("expected a comma-separated list of integers")
    return vals


def _paths(s) -> tuple[str, ...]:
    if isinstance(s, (list, tuple)):
        return tuple(str(v) for v in s)
    vals = tuple(part.strip() for part in str(s).split(",") if part.strip())
    if not vals:
        raise ValueError("expected a comma-separated list of paths")
    return vals


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in allowed:
            raise ValueError(f"must be one of {', '.join(allowed)}; got {s!r}")
        return s

    return parse


@dataclass(frozen=True)
class _Opt:
    """One long-form option of a subcommand."""

    flag: str
    parse: Callable = str
    default: object = None
    required: bool = False
    help: str = ""

    @property
    def dest(self) -> str:
        return self.flag.replace("-", "_")


def _corpus_opts(target_default: int = 200) -> list[_Opt]:
    return [
        _Opt("target-tokens", _int, target_default, help="segment size in tokens"),
        _Opt("group-size", _int, 16, help="segments per context group"),
        _Opt("scheme", _choice("whitespace"), "whitespace", help="token counting scheme"),
    ]


def _training_opts() -> list[_Opt]:
    return [
        _Opt("margin", _float, 0.1),
        _Opt("temperature", _float, 0.1),
        _Opt("negatives-per-query", _int, 10),
        _Opt("lr", _float, 0.5),
        _Opt("batch-size", _int, 0, help="0 trains full batch"),
        _Opt("max-steps", _int, 200),
        _Opt("eval-every", _int, 180),
        _Opt("patience", _int, 3),
        _Opt("momentum", _float, 0.0),
        _Opt("seed", _int, required=True),
        _Opt("dev-pairs", help="held-out pairs for early stopping"),
        _Opt("checkpoint-out", required=True),
        _Opt("log-out", help="JSONL training log path"),
    ]


def _encoder_opts(default_mode: str = "chunk-only") -> list[_Opt]:
    return [
        _Opt("checkpoint", help="base or co-trained checkpoint"),
        _Opt("residual-checkpoint", help="situated-tower checkpoint for composed mode"),
        _Opt("mode", _choice(*EMBED_MODES), default_mode),
        _Opt("template", help="situated template id (defaults per mode)"),
        _Opt("context-multiple", _int, 16),
    ]


# --------------------------------------------------------------------------
# shared loading helpers


def _require_files(*paths: str | None) -> list[Path]:
    """Validate that every given input path exists before any work starts."""
    out = []
    for p in paths:
        if p is None:
            continue
        path = Path(p)
        if not path.is_file():
            raise CliError(f"input file not found: {path}")
        out.append(path)
    return out


def _load_documents(cfg: Mapping) -> list[Document]:
    return read_documents_jsonl(cfg["documents"])


def _build_corpus(cfg: Mapping, documents: Sequence[Document]) -> Corpus:
    return Corpus.build(
        documents,
        target_tokens=cfg["target_tokens"],
        group_size=cfg["group_size"],
        scheme=cfg["scheme"],
    )


def _default_template(mode: str) -> str:
    return "dual-eos" if mode == "co-trained" else "chunk+context"


def _load_embedder(cfg: Mapping):
    """Build the embedder named by --mode from checkpoint files."""
    mode = cfg["mode"]
    template = cfg.get("template") or _default_template(mode)
    if template not in template_ids():
        raise CliError(f"unknown template {template!r}; known: {', '.join(template_ids())}")
    if not cfg.get("checkpoint"):
        raise CliError("missing required flag(s): --checkpoint")
    base, _ = load_checkpoint(cfg["checkpoint"])
    residual_path = cfg.get("residual_checkpoint")
    if mode == "chunk-only":
        if residual_path:
            raise CliError("conflicting modes: --residual-checkpoint given with --mode chunk-only")
        return SingleEncoderEmbedder(base)
    if mode == "composed":
        if not residual_path:
            raise CliError("composed mode needs --residual-checkpoint")
        situated, _ = load_checkpoint(residual_path)
        return ComposedEmbedder(base, situated, situated_template=template)
    if residual_path:
        raise CliError("conflicting modes: co-trained mode uses a single --checkpoint")
    return CoTrainedEmbedder(base, situated_template=template)


def _training_config(cfg: Mapping, n_negatives: int | None = None) -> TrainingConfig:
    return TrainingConfig(
        margin=cfg["margin"],
        temperature=cfg["temperature"],
        negatives_per_query=n_negatives if n_negatives is not None else cfg["negatives_per_query"],
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        max_steps=cfg["max_steps"],
        eval_every=cfg["eval_every"],
        patience=cfg["patience"],
        momentum=cfg["momentum"],
        seed=cfg["seed"],
    )


def _read_query_texts(cfg: Mapping) -> list[str]:
    if cfg.get("query_text") is not None and cfg.get("queries_file"):
        raise CliError("give either --query-text or --queries-file, not both")
    if cfg.get("query_text") is not None:
        return [cfg["query_text"]]
    if cfg.get("queries_file"):
        lines = Path(cfg["queries_file"]).read_text(encoding="utf-8").splitlines()
        texts = [ln for ln in lines if ln.strip()]
        if not texts:
            raise CliError(f"no queries in {cfg['queries_file']}")
        return texts
    raise CliError("one of --query-text or --queries-file is required")


def _bridge_endpoint() -> str:
    url = os.environ.get(ENCODER_URL_ENV, "").strip()
    if not url:
        raise CliError(f"--encoder bridge needs the {ENCODER_URL_ENV} environment variable")
    return url


# --------------------------------------------------------------------------
# embeddings file format: one meta line, then one JSON row per chunk


def _write_embeddings(path: str, ids, vectors: np.ndarray, meta: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json({"kind": "embeddings", **meta}) + "\n")
        for cid, vec in zip(ids, vectors):
            row = {"chunk_id": [cid[0], cid[1]], "vector": [float(x) for x in vec]}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def _read_embeddings(path: str) -> tuple[list[tuple[str, int]], np.ndarray, dict]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise CliError(f"empty embeddings file: {path}")
        meta = json.loads(header)
        if meta.get("kind") != "embeddings":
            raise CliError(f"not an embeddings file: {path}")
        ids, rows = [], []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            doc_id, ordinal = row["chunk_id"]
            ids.append((str(doc_id), int(ordinal)))
            rows.append(row["vector"])
    if not rows:
        raise CliError(f"embeddings file has no rows: {path}")
    return ids, np.asarray(rows, dtype=np.float64), meta


# --------------------------------------------------------------------------
# subcommand runners; each returns (input paths, output paths, summary line)


def _cmd_ingest(cfg) -> tuple[list, list, str]:
    inputs = _require_files(*cfg["input"])
    documents: list[Document] = []
    for path in inputs:
        if path.suffix == ".jsonl":
            documents.extend(read_documents_jsonl(path))
        else:
            documents.append(Document(doc_id=path.stem, text=path.read_text(encoding="utf-8")))
    seen: set[str] = set()
    for doc in documents:
        if doc.doc_id in seen:
            raise CliError(f"duplicate doc_id across inputs: {doc.doc_id!r}")
        seen.add(doc.doc_id)
    count = write_documents_jsonl(documents, cfg["output"])
    return inputs, [Path(cfg["output"])], f"ingested {count} document(s)"


def _cmd_segment(cfg) -> tuple[list, list, str]:
    inputs = _require_files(cfg["documents"])
    corpus = _build_corpus(cfg, _load_documents(cfg))
    count = write_segments_jsonl(corpus, cfg["output"])
    return (
        inputs,
        [Path(cfg["output"])],
        f"segmented {count} document(s) into {len(corpus.chunk_ids())} chunk(s)",
    )


def _cmd_pairs(cfg) -> tuple[list, list, str]:
    inputs = _require_files(cfg["documents"], cfg["annotations"])
    documents = _load_documents(cfg)
    annotations = read_annotations_jsonl(cfg["annotations"])
    corpus = _build_corpus(cfg, documents)
    pairs = build_pairs(
        annotations,
        corpus,
        context_source=cfg["context_source"],
        context_multiple=cfg["context_multiple"],
        context_cap_tokens=cfg["context_cap_tokens"],
        scheme=cfg["scheme"],
        split=cfg["split"],
        on_invalid=cfg["on_invalid"],
    )
    if cfg["negatives"] > 0:
        pairs = [
            attach_negatives(p, corpus, n=cfg["negatives"], rng_seed=cfg["rng_seed"])
            for p in pairs
        ]
    count = write_pairs_jsonl(pairs, cfg["output"])
    return inputs, [Path(cfg["output"])], f"wrote {count} pair(s)"


def _cmd_gen_synthetic(cfg) -> tuple[list, list, str]:
    spec = SyntheticSpec(
        n_docs=cfg["n_docs"],
        entities_per_doc=cfg["entities_per_doc"],
        sentences_per_entity=cfg["sentences_per_entity"],
        ambiguity_rate=cfg["ambiguity_rate"],
        seed=cfg["seed"],
    )
    info = write_synthetic(spec, cfg["documents_out"], cfg["annotations_out"])
    outputs = [Path(cfg["documents_out"]), Path(cfg["annotations_out"])]
    if cfg.get("info_out"):
        Path(cfg["info_out"]).write_text(canonical_json(info) + "\n", encoding="utf-8")
        outputs.append(Path(cfg["info_out"]))
    n_q = len(info["queries"])
    return [], outputs, f"generated {cfg['n_docs']} document(s), {n_q} query(ies)"


def _finish_training(cfg, result, regime: str) -> tuple[list[Path], str]:
    save_checkpoint(
        cfg["checkpoint_out"],
        result.params,
        regime=regime,
        step=result.best_step,
        extra={"stopped_early": result.stopped_early},
    )
    outputs = [Path(cfg["checkpoint_out"])]
    if cfg.get("log_out"):
        write_training_log(cfg["log_out"], result.log)
        outputs.append(Path(cfg["log_out"]))
    last = result.log[-1]["loss"] if result.log else float("nan")
    return outputs, f"trained to step {result.log[-1]['step'] if result.log else 0}, loss {last:.6f}"


def _cmd_train_base(cfg) -> tuple[list, list, str]:
    inputs = _require_files(cfg["pairs"], cfg["documents"], cfg.get("dev_pairs"))
    pairs = read_pairs_jsonl(cfg["pairs"])
    corpus = _build_corpus(cfg, _load_documents(cfg))
    dev = read_pairs_jsonl(cfg["dev_pairs"]) if cfg.get("dev_pairs") else None
    result = train_base(
        pairs,
        corpus,
        _training_config(cfg),
        feature_dim=cfg["feature_dim"],
        embed_dim=cfg["embed_dim"],
        dev_pairs=dev,
    )
    outputs, summary = _finish_training(cfg, result, regime="margin-base")
    return inputs, outputs, summary


def _cmd_train_residual(cfg) -> tuple[list, list, str]:
    inputs = _require_files(
        cfg["pairs"], cfg["documents"], cfg["base_checkpoint"], cfg.get("dev_pairs")
    )
    pairs = read_pairs_jsonl(cfg["pairs"])
    corpus = _build_corpus(cfg, _load_documents(cfg))
    base, _ = load_checkpoint(cfg["base_checkpoint"])
    dev = read_pairs_jsonl(cfg["dev_pairs"]) if cfg.get("dev_pairs") else None
    template = cfg.get("template") or "chunk+context"
    if template not in template_ids():
        raise CliError(f"unknown template {template!r}")
    result = train_residual(
        pairs,
        corpus,
        base,
        _training_config(cfg),
        dev_pairs=dev,
        situated_template=template,
    )
    outputs, summary = _finish_training(cfg, result, regime="margin-residual")
    return inputs, outputs, summary


def _embed_corpus_toy(cfg, corpus: Corpus):
    embedder = _load_embedder(cfg)
    ids = corpus.chunk_ids()
    texts = [corpus.chunk_text(cid) for cid in ids]
    contexts = None
    if embedder.needs_context:
        contexts = [
            situated_context_of(cid, corpus, cfg["context_multiple"], cfg["scheme"]).context_text
            for cid in ids
        ]
    vectors = embedder.embed_chunks(texts, contexts)
    return ids, vectors, embedder.fingerprint()


def _embed_corpus_bridge(cfg, corpus: Corpus):
    """Encode every chunk through the bridge endpoint instead of the toy tower.

    chunk-only sends bare chunks; composed and co-trained send the dual-eos
    rendering and store the sum of the two returned vectors.
    """
    endpoint = _bridge_endpoint()
    ids = corpus.chunk_ids()
    if cfg["mode"] == "chunk-only":
        batch = [assemble_input({"chunk": corpus.chunk_text(cid)}, "chunk-only") for cid in ids]
        vectors = np.asarray([v.values for v in bridge_encode(endpoint, batch)], dtype=np.float64)
    else:
        batch = []
        for cid in ids:
            ctx = situated_context_of(cid, corpus, cfg["context_multiple"], cfg["scheme"])
            batch.append(
                assemble_input(
                    {"chunk": corpus.chunk_text(cid), "context": ctx.context_text}, "dual-eos"
                )
            )
        pairs = bridge_encode(endpoint, batch)
        vectors = np.asarray([a.values + b.values for a, b in pairs], dtype=np.float64)
    return ids, vectors, f"bridge:{vectors.shape[1]}"


def _cmd_embed(cfg) -> tuple[list, list, str]:
    paths = [cfg["documents"]]
    if cfg["encoder"] == "bridge":
        if cfg.get("checkpoint") or cfg.get("residual_checkpoint"):
            raise CliError("conflicting modes: bridge encoding takes no checkpoints")
    else:
        if not cfg.get("checkpoint"):
            raise CliError("missing required flag(s): --checkpoint")
        paths.append(cfg["checkpoint"])
        if cfg.get("residual_checkpoint"):
            paths.append(cfg["residual_checkpoint"])
    inputs = _require_files(*paths)
    corpus = _build_corpus(cfg, _load_documents(cfg))
    if cfg["encoder"] == "bridge":
        ids, vectors, fingerprint = _embed_corpus_bridge(cfg, corpus)
    else:
        ids, vectors, fingerprint = _embed_corpus_toy(cfg, corpus)
    template = cfg.get("template") or (
        "chunk-only" if cfg["mode"] == "chunk-only" else _default_template(cfg["mode"])
    )
    meta = {
        "dim": int(vectors.shape[1]),
        "count": len(ids),
        "encoder": fingerprint,
        "template_id": template,
        "mode": cfg["mode"],
        "context_multiple": cfg["context_multiple"],
    }
    _write_embeddings(cfg["output"], ids, vectors, meta)
    return inputs, [Path(cfg["output"])], f"embedded {len(ids)} chunk(s) at dim {meta['dim']}"


def _cmd_index(cfg) -> tuple[list, list, str]:
    inputs = _require_files(cfg["embeddings"])
    ids, vectors, meta = _read_embeddings(cfg["embeddings"])
    metadata = {
        "encoder": meta.get("encoder", ""),
        "template_id": meta.get("template_id", ""),
        "mode": meta.get("mode", ""),
    }
    index = build_index(list(zip(ids, vectors)), metadata=metadata)
    save_index(index, cfg["output"])
    return inputs, [Path(cfg["output"])], f"indexed {len(ids)} vector(s), dim {vectors.shape[1]}"


def _cmd_query(cfg) -> tuple[list, list, str]:
    paths = [cfg["index"]]
    if cfg["encoder"] == "toy":
        paths.append(cfg["checkpoint"])
        if cfg.get("residual_checkpoint"):
            paths.append(cfg["residual_checkpoint"])
    if cfg.get("queries_file"):
        paths.append(cfg["queries_file"])
    inputs = _require_files(*paths)
    index = load_index(cfg["index"])
    texts = _read_query_texts(cfg)
    if cfg["encoder"] == "bridge":
        batch = [assemble_input({"query": t}, "query") for t in texts]
        replies = bridge_encode(_bridge_endpoint(), batch)
        q_vectors = np.asarray([v.values for v in replies], dtype=np.float64)
    else:
        q_vectors = _load_embedder(cfg).embed_queries(texts)
    if q_vectors.shape[1] != index.dim:
        raise CliError(f"query dim {q_vectors.shape[1]} does not match index dim {index.dim}")
    lines = []
    for text, vec in zip(texts, q_vectors):
        result = query_topk(index, vec, cfg["k"])
        lines.append(
            json.dumps(
                {
                    "query": text,
                    "k": cfg["k"],
                    "flags": list(result.flags),
                    "results": [
                        {"chunk_id": [cid[0], cid[1]], "score": float(score)}
                        for cid, score in result.ranked
                    ],
                },
                separators=(",", ":"),
            )
        )
    payload = "\n".join(lines) + "\n"
    outputs = []
    if cfg.get("output"):
        Path(cfg["output"]).write_text(payload, encoding="utf-8")
        outputs.append(Path(cfg["output"]))
    else:
        sys.stdout.write(payload)
    return inputs, outputs, f"ran {len(texts)} query(ies) at k={cfg['k']}"


def _cmd_eval(cfg) -> tuple[list, list, str]:
    paths = [cfg["pairs"], cfg["documents"], cfg["checkpoint"]]
    if cfg.get("residual_checkpoint"):
        paths.append(cfg["residual_checkpoint"])
    inputs = _require_files(*paths)
    pairs = read_pairs_jsonl(cfg["pairs"])
    corpus = _build_corpus(cfg, _load_documents(cfg))
    embedder = _load_embedder(cfg)
    report = evaluate_pairs(
        embedder,
        pairs,
        corpus,
        ks=cfg["k"],
        context_multiple=cfg["context_multiple"],
        prf_k=cfg["prf_k"],
        task_id=cfg["task_id"],
    )
    write_report_json(report, cfg["report_out"])
    head = ", ".join(f"recall@{k} {report.aggregates[f'recall@{k}']:.4f}" for k in cfg["k"])
    return inputs, [Path(cfg["report_out"])], head


def _mean_returned_tokens(report) -> float:
    vals = [row.returned_tokens for row in report.rows if row.returned_tokens is not None]
    return float(np.mean(vals)) if vals else 0.0


def _cmd_sweep_budget(cfg) -> tuple[list, list, str]:
    paths = [cfg["documents"], cfg["annotations"], cfg["checkpoint"]]
    if cfg.get("residual_checkpoint"):
        paths.append(cfg["residual_checkpoint"])
    inputs = _require_files(*paths)
    documents = _load_documents(cfg)
    annotations = read_annotations_jsonl(cfg["annotations"])
    embedder = _load_embedder(cfg)
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    outputs = []
    for budget in cfg["budgets"]:
        for report in fixed_budget_sweep(
            documents,
            annotations,
            embedder,
            budget_tokens=budget,
            chunk_sizes=cfg["chunk_sizes"],
            context_multiple=cfg["context_multiple"],
            scheme=cfg["scheme"],
            task_id=f"budget-{budget}",
        ):
            path = out_dir / f"budget{budget}_chunk{report.axes['chunk_size']}.report.json"
            write_report_json(report, path)
            reports.append(report)
            outputs.append(path)
    csv_path = out_dir / "sweep-budget.csv"
    write_sweep_csv(reports, csv_path)
    outputs.append(csv_path)
    tsv_path = out_dir / "sweep-budget.tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("budget_tokens\tchunk_size\tk\trecall\tmean_returned_tokens\n")
        for report in reports:
            k = report.axes["k"]
            fh.write(
                f"{report.axes['budget_tokens']}\t{report.axes['chunk_size']}\t{k}\t"
                f"{report.aggregates[f'recall@{k}']:.6f}\t{_mean_returned_tokens(report):.2f}\n"
            )
    outputs.append(tsv_path)
    return inputs, outputs, f"swept {len(reports)} budget/size cell(s)"


def _cmd_sweep_context(cfg) -> tuple[list, list, str]:
    paths = [cfg["pairs"], cfg["documents"], cfg["checkpoint"]]
    if cfg.get("residual_checkpoint"):
        paths.append(cfg["residual_checkpoint"])
    inputs = _require_files(*paths)
    pairs = read_pairs_jsonl(cfg["pairs"])
    corpus = _build_corpus(cfg, _load_documents(cfg))
    embedder = _load_embedder(cfg)
    if not embedder.needs_context:
        raise CliError("conflicting modes: sweep-context needs a situated embedder "
                       "(--mode composed or co-trained)")
    reports = context_length_sweep(
        embedder,
        pairs,
        corpus,
        multiples=cfg["multiples"],
        ks=cfg["k"],
        task_id=cfg["task_id"],
    )
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for report in reports:
        path = out_dir / f"context{report.axes['context_multiple']}.report.json"
        write_report_json(report, path)
        outputs.append(path)
    csv_path = out_dir / "sweep-context.csv"
    write_sweep_csv(reports, csv_path)
    tsv_path = out_dir / "sweep-context.tsv"
    write_sweep_tsv(reports, tsv_path, x_axis="context_multiple", y_metric=f"recall@{cfg['k'][0]}")
    outputs.extend([csv_path, tsv_path])
    return inputs, outputs, f"swept {len(reports)} context multiple(s)"


# --------------------------------------------------------------------------
# registry

_COMMANDS: dict[str, tuple[str, list[_Opt], Callable]] = {
    "ingest": (
        "Normalize raw text or JSONL files into a documents artifact.",
        [
            _Opt("input", _paths, required=True, help="comma-separated .txt/.jsonl files"),
            _Opt("output", required=True, help="documents JSONL path"),
        ],
        _cmd_ingest,
    ),
    "segment": (
        "Segment documents into chunks and write the segment table.",
        [
            _Opt("documents", required=True),
            _Opt("output", required=True, help="segments JSONL path"),
            *_corpus_opts(),
        ],
        _cmd_segment,
    ),
    "pairs": (
        "Anchor annotations to chunks and attach sampled negatives.",
        [
            _Opt("documents", required=True),
            _Opt("annotations", required=True),
            _Opt("output", required=True, help="pairs JSONL path"),
            _Opt("context-source", _choice("annotation-span", "group"), "annotation-span"),
            _Opt("context-multiple", _int, 16),
            _Opt("context-cap-tokens", _int, 8192),
            _Opt("split", str, "train"),
            _Opt("on-invalid", _choice("error", "skip"), "error"),
            _Opt("negatives", _int, 10, help="negatives per pair; 0 skips sampling"),
            _Opt("rng-seed", _int, required=True),
            *_corpus_opts(),
        ],
        _cmd_pairs,
    ),
    "gen-synthetic": (
        "Generate the synthetic entity-thread corpus with gold annotations.",
        [
            _Opt("n-docs", _int, 1),
            _Opt("entities-per-doc", _int, 4),
            _Opt("sentences-per-entity", _int, 16),
            _Opt("ambiguity-rate", _float, 0.5),
            _Opt("seed", _int, required=True),
            _Opt("documents-out", required=True),
            _Opt("annotations-out", required=True),
            _Opt("info-out", help="optional JSON with per-query metadata"),
        ],
        _cmd_gen_synthetic,
    ),
    "train-base": (
        "Train the chunk-only tower with the margin objective.",
        [
            _Opt("pairs", required=True),
            _Opt("documents", required=True),
            _Opt("feature-dim", _int, DEFAULT_FEATURE_DIM),
            _Opt("embed-dim", _int, DEFAULT_EMBED_DIM),
            *_training_opts(),
            *_corpus_opts(),
        ],
        _cmd_train_base,
    ),
    "train-residual": (
        "Train the situated residual tower against a frozen base.",
        [
            _Opt("pairs", required=True),
            _Opt("documents", required=True),
            _Opt("base-checkpoint", required=True),
            _Opt("template", help="situated template id (default chunk+context)"),
            _Opt("context-multiple", _int, 16),
            *_training_opts(),
            *_corpus_opts(),
        ],
        _cmd_train_residual,
    ),
    "embed": (
        "Embed every corpus chunk with a checkpointed or bridged encoder.",
        [
            _Opt("documents", required=True),
            _Opt("output", required=True, help="embeddings JSONL path"),
            _Opt("encoder", _choice("toy", "bridge"), "toy"),
            *_encoder_opts(),
            *_corpus_opts(),
        ],
        _cmd_embed,
    ),
    "index": (
        "Pack an embeddings artifact into a binary vector index.",
        [
            _Opt("embeddings", required=True),
            _Opt("output", required=True, help="index file path"),
        ],
        _cmd_index,
    ),
    "query": (
        "Run top-k retrieval against a saved index.",
        [
            _Opt("index", required=True),
            _Opt("k", _int, 10),
            _Opt("query-text", help="single query string"),
            _Opt("queries-file", help="one query per line"),
            _Opt("output", help="results JSONL; stdout when omitted"),
            _Opt("encoder", _choice("toy", "bridge"), "toy"),
            *_encoder_opts(),
        ],
        _cmd_query,
    ),
    "eval": (
        "Score pairs end to end and write an evaluation report.",
        [
            _Opt("pairs", required=True),
            _Opt("documents", required=True),
            _Opt("report-out", required=True),
            _Opt("k", _ints, DEFAULT_KS, help="comma-separated cutoffs"),
            _Opt("prf-k", _int, DEFAULT_PRF_K),
            _Opt("task-id", str, "eval"),
            *_encoder_opts(),
            *_corpus_opts(),
        ],
        _cmd_eval,
    ),
    "sweep-budget": (
        "Sweep chunk sizes under fixed retrieval token budgets.",
        [
            _Opt("documents", required=True),
            _Opt("annotations", required=True),
            _Opt("output-dir", required=True),
            _Opt("budgets", _ints, required=True, help="comma-separated token budgets"),
            _Opt("chunk-sizes", _ints, required=True, help="comma-separated chunk sizes"),
            *_encoder_opts(),
            _Opt("scheme", _choice("whitespace"), "whitespace"),
        ],
        _cmd_sweep_budget,
    ),
    "sweep-context": (
        "Sweep situated context multiples and report recall per width.",
        [
            _Opt("pairs", required=True),
            _Opt("documents", required=True),
            _Opt("output-dir", required=True),
            _Opt("multiples", _ints, CONTEXT_SWEEP_MULTIPLES),
            _Opt("k", _ints, DEFAULT_KS),
            _Opt("task-id", str, "sweep-context"),
            *_encoder_opts("composed"),
            *_corpus_opts(),
        ],
        _cmd_sweep_context,
    ),
}

_SEEDED = {"pairs", "gen-synthetic", "train-base", "train-residual"}


# --------------------------------------------------------------------------
# config resolution


def _read_config_file(path: str) -> dict[str, str]:
    """Parse a key = value file; later lines win, '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip().strip('"')
    return out


def _read_manifest_config(path: str, subcommand: str) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("kind") != "sitemb-run":
        raise CliError(f"not a run manifest: {path}")
    if data.get("subcommand") != subcommand:
        raise CliError(
            f"manifest {path} is for {data.get('subcommand')!r}, not {subcommand!r}"
        )
    return dict(data.get("config", {}))


def _resolve_config(
    opts: Sequence[_Opt],
    flag_values: Mapping[str, str | None],
    file_values: Mapping[str, str],
    manifest_values: Mapping[str, object],
) -> dict:
    unknown = set(file_values) - {o.dest for o in opts}
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg: dict = {}
    missing = []
    for opt in opts:
        raw = flag_values.get(opt.dest)
        if raw is None:
            raw = file_values.get(opt.dest)
        if raw is None:
            raw = manifest_values.get(opt.dest)
        if raw is None:
            if opt.required:
                missing.append(f"--{opt.flag}")
            else:
                cfg[opt.dest] = opt.default
            continue
        try:
            # Flag and config-file values are strings; manifest values are
            # JSON-typed. Every parser accepts both forms.
            cfg[opt.dest] = opt.parse(raw)
        except (TypeError, ValueError) as exc:
            raise CliError(f"--{opt.flag}: {exc}") from None
    if missing:
        raise CliError(f"missing required flag(s): {', '.join(missing)}")
    return cfg


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value


def _build_parser(name: str, opts: Sequence[_Opt], help_text: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=f"sitemb {name}", description=help_text, add_help=False
    )
    parser.add_argument("--help", action="help", help="show this help and exit")
    parser.add_argument("--config", default=None, help="key = value file merged under flags")
    parser.add_argument("--from-manifest", dest="from_manifest", default=None,
                        help="replay the configuration of an earlier run")
    parser.add_argument("--manifest-out", dest="manifest_out", default=None,
                        help="manifest path (default: next to the first output)")
    for opt in opts:
        parser.add_argument(f"--{opt.flag}", dest=opt.dest, default=None, help=opt.help)
    return parser


def _usage() -> str:
    lines = ["usage: sitemb <subcommand> [--flags]", "", "subcommands:"]
    for name, (help_text, _, _) in _COMMANDS.items():
        lines.append(f"  {name:<15} {help_text}")
    lines.append("")
    lines.append("run `sitemb <subcommand> --help` for flags; see also --config, "
                 "--from-manifest, --manifest-out")
    return "\n".join(lines)


def _error_line(subcommand: str | None, exc: Exception) -> str:
    return json.dumps(
        {
            "error": {
                "subcommand": subcommand,
                "type": type(exc).__name__,
                "message": str(exc),
            }
        },
        separators=(",", ":"),
    )


def run(argv: Sequence[str]) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    subcommand = None
    try:
        if not argv or argv[0] in ("--help",):
            print(_usage())
            return 0
        subcommand = argv[0]
        if subcommand not in _COMMANDS:
            raise CliError(f"unknown subcommand {subcommand!r}; known: "
                           f"{', '.join(_COMMANDS)}")
        help_text, opts, runner = _COMMANDS[subcommand]
        parser = _build_parser(subcommand, opts, help_text)
        parser.error = _raise_usage  # type: ignore[method-assign]
        ns = parser.parse_args(list(argv[1:]))
        if ns.config:
            _require_files(ns.config)
        if ns.from_manifest:
            _require_files(ns.from_manifest)
        file_values = _read_config_file(ns.config) if ns.config else {}
        manifest_values = (
            _read_manifest_config(ns.from_manifest, subcommand) if ns.from_manifest else {}
        )
        cfg = _resolve_config(opts, vars(ns), file_values, manifest_values)
        inputs, outputs, summary = runner(cfg)
        manifest_path = _write_manifest(subcommand, cfg, inputs, outputs, ns.manifest_out)
        print(f"{subcommand}: {summary}")
        print(f"manifest: {manifest_path}")
        return 0
    except CliError as exc:
        sys.stderr.write(_error_line(subcommand, exc) + "\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        sys.stderr.write(_error_line(subcommand, exc) + "\n")
        return 1


def _raise_usage(message: str):
    raise CliError(message)


def _write_manifest(subcommand, cfg, inputs, outputs, manifest_out) -> Path:
    if manifest_out is None:
        if cfg.get("output_dir"):
            manifest_out = Path(cfg["output_dir"]) / "run.manifest.json"
        else:
            anchor = Path(outputs[0]) if outputs else Path(f"{subcommand}.run")
            manifest_out = anchor.with_name(anchor.name + ".manifest.json")
    manifest = {
        "kind": "sitemb-run",
        "version": __version__,
        "subcommand": subcommand,
        "seed": cfg.get("seed", cfg.get("rng_seed")),
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path = Path(manifest_out)
    path.write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return path


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
