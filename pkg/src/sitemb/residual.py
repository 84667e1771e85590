"""Residual composition, contrastive losses, and the training procedures.

The model family is deliberately tiny: each tower is a linear map over hashed
text features followed by L2 normalization. Retrieval embeddings compose two
towers by raw vector addition. A base tower is trained on chunk-only
retrieval with a margin loss; a second tower is then trained, with the base
frozen, so that the composed embedding resolves what the chunk alone cannot.
A co-training regime trains one shared tower against three score channels
instead.

All gradients are analytic and exact for this model class, which makes
finite-difference checking meaningful, and full-batch training bitwise
reproducible.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import Corpus, QueryChunkPair, situated_context_of
from .encoding import (
    DEFAULT_EOS_SENTINEL,
    EncoderParams,
    assemble_input,
    encode_texts,
    featurize_texts,
    init_params,
)
from .util import stable_digest

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.1
DEFAULT_TEMPERATURE = 0.1
CO_TRAINING_TEMPERATURE = 0.01
REGIMES = ("margin-residual", "co-training")


@dataclass
class TrainingConfig:
    """Knobs for both training regimes.

    margin and temperature default to 0.1 for the margin regime; the
    co-training regime ignores margin and wants temperature 0.01. A
    batch_size of zero means full batch, which is also what makes training
    bitwise reproducible.
    """

    margin: float = DEFAULT_MARGIN
    temperature: float = DEFAULT_TEMPERATURE
    negatives_per_query: int = 10
    lr: float = 0.5
    batch_size: int = 0
    max_steps: int = 200
    eval_every: int = 180
    seed: int = 0
    regime: str = "margin-residual"
    momentum: float = 0.0
    patience: int = 3
    context_multiple: int = 16
    eos_sentinel: str = DEFAULT_EOS_SENTINEL

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.negatives_per_query < 1:
            raise ValueError("negatives_per_query must be >= 1")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


# ---------------------------------------------------------------------------
# composition and scalar losses


def compose(b, s) -> np.ndarray:
    """Raw sum of base and situated vectors. Deliberately not re-normalized:
    the two towers emit unit vectors and the sum's length carries how much
    they agree."""
    bv = np.asarray(getattr(b, "values", b), dtype=np.float64)
    sv = np.asarray(getattr(s, "values", s), dtype=np.float64)
    if bv.shape != sv.shape:
        raise ValueError(f"dimension mismatch: {bv.shape} vs {sv.shape}")
    return bv + sv


def similarity(a, b, temperature: float = 1.0) -> float:
    """Temperature-scaled cosine. A zero vector scores -1/temperature."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    av = np.asarray(getattr(a, "values", a), dtype=np.float64)
    bv = np.asarray(getattr(b, "values", b), dtype=np.float64)
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        logger.warning("similarity called with a zero vector; returning -1/temperature")
        return -1.0 / temperature
    return float(av @ bv / (na * nb)) / temperature


def margin_loss(
    q,
    c_pos,
    c_negs: Sequence,
    margin: float = DEFAULT_MARGIN,
    temperature: float = DEFAULT_TEMPERATURE,
) -> float:
    """Mean hinge over negatives: max(0, margin + sim(q, neg) - sim(q, pos)).

    Zero exactly when the positive beats every negative by at least `margin`
    in tempered-cosine units.
    """
    if len(c_negs) == 0:
        raise ValueError("margin_loss needs at least one negative")
    s_pos = similarity(q, c_pos, temperature)
    total = 0.0
    for neg in c_negs:
        total += max(0.0, margin + similarity(q, neg, temperature) - s_pos)
    return total / len(c_negs)


def co_training_loss(
    q,
    c_b,
    c_s,
    negatives: Sequence[tuple],
    temperature: float = CO_TRAINING_TEMPERATURE,
) -> float:
    """Sum of three softmax cross-entropy channels over the candidate set.

    Channels score candidates by sim(q, c_b), sim(q, c_s), and their sum; the
    positive sits at index 0 of each channel. negatives is a sequence of
    (c_b, c_s) vector pairs; empty is allowed and gives zero loss.
    """
    sb = [similarity(q, c_b, temperature)]
    ss = [similarity(q, c_s, temperature)]
    for nb, ns in negatives:
        sb.append(similarity(q, nb, temperature))
        ss.append(similarity(q, ns, temperature))
    loss = 0.0
    for scores in (sb, ss, [a + b for a, b in zip(sb, ss)]):
        arr = np.asarray(scores)
        m = arr.max()
        loss += float(m + np.log(np.exp(arr - m).sum()) - arr[0])
    return loss


# ---------------------------------------------------------------------------
# batched forward/backward

# The geometry used throughout: a trainable tower maps feature rows X to
# A = X @ W, then normalizes rows to unit length (zero rows stay zero), and
# the retrieval vector adds a frozen offset on top. Gradients flow to W as
# X.T @ G where G is the per-row upstream gradient pulled back through the
# normalization.


@dataclass
class MarginData:
    """Featurized instances for the margin regime.

    Xq/Xpos are (n, F); Xneg is (n * n_negatives, F) with pair i's negatives
    in rows [i*N, (i+1)*N). base_* carry frozen additive offsets (stage 2) or
    None (stage 1, pure single tower).
    """

    Xq: sp.csr_matrix
    Xpos: sp.csr_matrix
    Xneg: sp.csr_matrix
    n_negatives: int
    base_q: np.ndarray | None = None
    base_pos: np.ndarray | None = None
    base_neg: np.ndarray | None = None

    @property
    def n_pairs(self) -> int:
        return self.Xq.shape[0]

    def subset(self, idx: np.ndarray) -> "MarginData":
        N = self.n_negatives
        neg_idx = (idx[:, None] * N + np.arange(N)[None, :]).ravel()
        return MarginData(
            Xq=self.Xq[idx],
            Xpos=self.Xpos[idx],
            Xneg=self.Xneg[neg_idx],
            n_negatives=N,
            base_q=None if self.base_q is None else self.base_q[idx],
            base_pos=None if self.base_pos is None else self.base_pos[idx],
            base_neg=None if self.base_neg is None else self.base_neg[neg_idx],
        )

    def fingerprint(self) -> str:
        return stable_digest(
            self.Xq.shape, self.Xq.nnz, self.Xpos.nnz, self.Xneg.nnz, self.n_negatives
        ).hex()[:12]


@dataclass
class CoTrainingData:
    """Featurized instances for the co-training regime.

    Candidate block k of pair i sits at row i*K + k; candidate 0 is the
    positive. Xcand_chunk holds chunk-view features, Xcand_situated the
    situated-view features of the same candidates.
    """

    Xq: sp.csr_matrix
    Xcand_chunk: sp.csr_matrix
    Xcand_situated: sp.csr_matrix
    n_candidates: int

    @property
    def n_pairs(self) -> int:
        return self.Xq.shape[0]

    def subset(self, idx: np.ndarray) -> "CoTrainingData":
        K = self.n_candidates
        cand_idx = (idx[:, None] * K + np.arange(K)[None, :]).ravel()
        return CoTrainingData(
            Xq=self.Xq[idx],
            Xcand_chunk=self.Xcand_chunk[cand_idx],
            Xcand_situated=self.Xcand_situated[cand_idx],
            n_candidates=K,
        )

    def fingerprint(self) -> str:
        return stable_digest(
            self.Xq.shape, self.Xq.nnz, self.Xcand_chunk.nnz, self.n_candidates
        ).hex()[:12]


def _tower(X: sp.csr_matrix, W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward one tower: returns (unit rows, raw norms, safe norms)."""
    A = np.asarray(X @ W)
    norms = np.linalg.norm(A, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    return A / safe[:, None], norms, safe


def _pull_through_normalize(G: np.ndarray, unit: np.ndarray, safe_norms: np.ndarray, zero: np.ndarray) -> np.ndarray:
    """Backprop G through row normalization (zero rows pass nothing)."""
    radial = np.sum(G * unit, axis=1, keepdims=True)
    out = (G - radial * unit) / safe_norms[:, None]
    out[zero] = 0.0
    return out


def _cos_rows(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Rowwise cosine with the zero-vector convention cos = -1.

    Returns (cos, norm_u, norm_v, valid_mask).
    """
    nu = np.linalg.norm(U, axis=1)
    nv = np.linalg.norm(V, axis=1)
    denom = nu * nv
    valid = denom > 0.0
    dot = np.sum(U * V, axis=1)
    cos = np.where(valid, dot / np.where(valid, denom, 1.0), -1.0)
    return cos, nu, nv, valid


def _dcos(U, V, cos, nu, nv, valid, coeff):
    """Gradient of coeff * cos(U_r, V_r) with respect to U, rowwise."""
    nu_s = np.where(nu == 0.0, 1.0, nu)
    nv_s = np.where(nv == 0.0, 1.0, nv)
    g = V / (nu_s * nv_s)[:, None] - cos[:, None] * U / (nu_s**2)[:, None]
    g *= (coeff * valid)[:, None]
    return g


def margin_objective(
    W: np.ndarray,
    data: MarginData,
    margin: float = DEFAULT_MARGIN,
    temperature: float = DEFAULT_TEMPERATURE,
) -> float:
    loss, _ = _margin_forward_backward(W, data, margin, temperature, want_grad=False)
    return loss


def margin_gradient(
    W: np.ndarray,
    data: MarginData,
    margin: float = DEFAULT_MARGIN,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[float, np.ndarray]:
    return _margin_forward_backward(W, data, margin, temperature, want_grad=True)


def _margin_forward_backward(W, data: MarginData, margin, temperature, want_grad):
    n, N = data.n_pairs, data.n_negatives
    if n == 0:
        raise ValueError("empty batch")
    Uq, norms_q, safe_q = _tower(data.Xq, W)
    Up, norms_p, safe_p = _tower(data.Xpos, W)
    Un, norms_n, safe_n = _tower(data.Xneg, W)
    zq, zp, zn = norms_q == 0.0, norms_p == 0.0, norms_n == 0.0

    Q = Uq if data.base_q is None else data.base_q + Uq
    P = Up if data.base_pos is None else data.base_pos + Up
    C = Un if data.base_neg is None else data.base_neg + Un

    cos_p, nq, np_, valid_p = _cos_rows(Q, P)
    Qrep = np.repeat(Q, N, axis=0)
    cos_n, nq_rep, nc, valid_n = _cos_rows(Qrep, C)

    tau = temperature
    hinge = margin + (cos_n - np.repeat(cos_p, N)) / tau
    active = hinge > 0.0
    loss = float(np.sum(np.where(active, hinge, 0.0))) / (n * N)

    if not want_grad:
        return loss, None

    # upstream coefficients on each cosine
    coeff_n = active.astype(np.float64) / (n * N * tau)
    coeff_p = -np.add.reduceat(active.astype(np.float64), np.arange(0, n * N, N)) / (n * N * tau)

    G_Q = _dcos(Q, P, cos_p, nq, np_, valid_p, coeff_p)
    G_P = _dcos(P, Q, cos_p, np_, nq, valid_p, coeff_p)
    G_Qn = _dcos(Qrep, C, cos_n, nq_rep, nc, valid_n, coeff_n)
    G_C = _dcos(C, Qrep, cos_n, nc, nq_rep, valid_n, coeff_n)
    G_Q += G_Qn.reshape(n, N, -1).sum(axis=1)

    Gq = _pull_through_normalize(G_Q, Uq, safe_q, zq)
    Gp = _pull_through_normalize(G_P, Up, safe_p, zp)
    Gn = _pull_through_normalize(G_C, Un, safe_n, zn)

    grad = np.asarray(data.Xq.T @ Gq) + np.asarray(data.Xpos.T @ Gp) + np.asarray(data.Xneg.T @ Gn)
    return loss, grad


def co_training_objective(
    W: np.ndarray,
    data: CoTrainingData,
    temperature: float = CO_TRAINING_TEMPERATURE,
) -> float:
    loss, _ = _co_training_forward_backward(W, data, temperature, want_grad=False)
    return loss


def co_training_gradient(
    W: np.ndarray,
    data: CoTrainingData,
    temperature: float = CO_TRAINING_TEMPERATURE,
) -> tuple[float, np.ndarray]:
    return _co_training_forward_backward(W, data, temperature, want_grad=True)


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    m = S.max(axis=1, keepdims=True)
    e = np.exp(S - m)
    return e / e.sum(axis=1, keepdims=True)


def _co_training_forward_backward(W, data: CoTrainingData, temperature, want_grad):
    n, K = data.n_pairs, data.n_candidates
    if n == 0:
        raise ValueError("empty batch")
    tau = temperature
    Uq, norms_q, safe_q = _tower(data.Xq, W)
    Ub, norms_b, safe_b = _tower(data.Xcand_chunk, W)
    Us, norms_s, safe_s = _tower(data.Xcand_situated, W)
    zq, zb, zs = norms_q == 0.0, norms_b == 0.0, norms_s == 0.0

    Qrep = np.repeat(Uq, K, axis=0)
    cos_b, nqb, nb, valid_b = _cos_rows(Qrep, Ub)
    cos_s, nqs, ns, valid_s = _cos_rows(Qrep, Us)

    Sb = (cos_b / tau).reshape(n, K)
    Ss = (cos_s / tau).reshape(n, K)
    Ssum = Sb + Ss

    loss = 0.0
    for S in (Sb, Ss, Ssum):
        m = S.max(axis=1)
        lse = m + np.log(np.exp(S - m[:, None]).sum(axis=1))
        loss += float(np.sum(lse - S[:, 0]))
    loss /= n

    if not want_grad:
        return loss, None

    onehot = np.zeros((n, K))
    onehot[:, 0] = 1.0
    dSb = (_softmax_rows(Sb) - onehot) / n
    dSs = (_softmax_rows(Ss) - onehot) / n
    dSsum = (_softmax_rows(Ssum) - onehot) / n

    dcos_b = ((dSb + dSsum) / tau).ravel()
    dcos_s = ((dSs + dSsum) / tau).ravel()

    G_Qb = _dcos(Qrep, Ub, cos_b, nqb, nb, valid_b, dcos_b)
    G_B = _dcos(Ub, Qrep, cos_b, nb, nqb, valid_b, dcos_b)
    G_Qs = _dcos(Qrep, Us, cos_s, nqs, ns, valid_s, dcos_s)
    G_S = _dcos(Us, Qrep, cos_s, ns, nqs, valid_s, dcos_s)
    G_Q = (G_Qb + G_Qs).reshape(n, K, -1).sum(axis=1)

    Gq = _pull_through_normalize(G_Q, Uq, safe_q, zq)
    Gb = _pull_through_normalize(G_B, Ub, safe_b, zb)
    Gs = _pull_through_normalize(G_S, Us, safe_s, zs)

    grad = (
        np.asarray(data.Xq.T @ Gq)
        + np.asarray(data.Xcand_chunk.T @ Gb)
        + np.asarray(data.Xcand_situated.T @ Gs)
    )
    return loss, grad


def gradient(loss_id: str, params: EncoderParams, batch) -> tuple[float, np.ndarray]:
    """Analytic (loss, gradient) for a batch under the named loss.

    The hinge kink takes subgradient zero. Non-finite results raise with a
    batch fingerprint so the offending data can be found again.
    """
    if loss_id == "margin":
        loss, grad = margin_gradient(params.weights, batch)
    elif loss_id == "co-training":
        loss, grad = co_training_gradient(params.weights, batch)
    else:
        raise ValueError(f"loss_id must be 'margin' or 'co-training', got {loss_id!r}")
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(
            f"non-finite loss/gradient for batch {batch.fingerprint()} under {loss_id}"
        )
    return loss, grad


# ---------------------------------------------------------------------------
# embedders


class SingleEncoderEmbedder:
    """Chunk-only retrieval with one tower. Ignores contexts entirely."""

    needs_context = False

    def __init__(self, params: EncoderParams):
        self.params = params

    @property
    def embed_dim(self) -> int:
        return self.params.embed_dim

    def embed_queries(self, texts: Sequence[str]) -> np.ndarray:
        out, _ = encode_texts(self.params, list(texts), zero_policy="zero")
        return out

    def embed_chunks(self, chunk_texts: Sequence[str], context_texts=None) -> np.ndarray:
        out, _ = encode_texts(self.params, list(chunk_texts), zero_policy="zero")
        return out

    def fingerprint(self) -> str:
        return f"single:{self.params.fingerprint()}"


class ComposedEmbedder:
    """Base tower plus situated tower, composed by raw addition.

    The base tower sees the bare chunk (or query); the situated tower sees
    the chunk rendered with its context under situated_template, and the bare
    query text on the query side, since queries carry no context.
    """

    needs_context = True

    def __init__(
        self,
        base: EncoderParams,
        situated: EncoderParams,
        base_frozen: bool = True,
        situated_template: str = "chunk+context",
        eos_sentinel: str = DEFAULT_EOS_SENTINEL,
    ):
        if base.embed_dim != situated.embed_dim:
            raise ValueError(
                f"embed_dim mismatch: base {base.embed_dim} vs situated {situated.embed_dim}"
            )
        self.base = base
        self.situated = situated
        self.base_frozen = base_frozen
        self.situated_template = situated_template
        self.eos_sentinel = eos_sentinel

    @property
    def embed_dim(self) -> int:
        return self.base.embed_dim

    def situated_text(self, chunk: str, context: str) -> str:
        rendered = assemble_input(
            {"chunk": chunk, "context": context},
            self.situated_template,
            eos_sentinel=self.eos_sentinel,
        )
        if rendered.mode == "dual-eos":
            return rendered.text[: rendered.pooling_marks[1]]
        return rendered.text

    def embed_queries(self, texts: Sequence[str]) -> np.ndarray:
        qb, _ = encode_texts(self.base, list(texts), zero_policy="zero")
        qs, _ = encode_texts(self.situated, list(texts), zero_policy="zero")
        return qb + qs

    def embed_chunks(self, chunk_texts: Sequence[str], context_texts=None) -> np.ndarray:
        if context_texts is None:
            raise ValueError("ComposedEmbedder needs context_texts for chunks")
        if len(context_texts) != len(chunk_texts):
            raise ValueError("chunk_texts and context_texts lengths differ")
        cb, _ = encode_texts(self.base, list(chunk_texts), zero_policy="zero")
        situated_inputs = [
            self.situated_text(c, ctx) for c, ctx in zip(chunk_texts, context_texts)
        ]
        cs, _ = encode_texts(self.situated, situated_inputs, zero_policy="zero")
        return cb + cs

    def fingerprint(self) -> str:
        return (
            f"composed:{self.base.fingerprint()}+{self.situated.fingerprint()}"
            f":{self.situated_template}"
        )


class CoTrainedEmbedder:
    """One shared tower read in two views and composed, dual-eos style."""

    needs_context = True

    def __init__(
        self,
        params: EncoderParams,
        situated_template: str = "dual-eos",
        eos_sentinel: str = DEFAULT_EOS_SENTINEL,
    ):
        self.params = params
        self.situated_template = situated_template
        self.eos_sentinel = eos_sentinel

    @property
    def embed_dim(self) -> int:
        return self.params.embed_dim

    def situated_text(self, chunk: str, context: str) -> str:
        rendered = assemble_input(
            {"chunk": chunk, "context": context},
            self.situated_template,
            eos_sentinel=self.eos_sentinel,
        )
        if rendered.mode == "dual-eos":
            return rendered.text[: rendered.pooling_marks[1]]
        return rendered.text

    def embed_queries(self, texts: Sequence[str]) -> np.ndarray:
        q, _ = encode_texts(self.params, list(texts), zero_policy="zero")
        return q

    def embed_chunks(self, chunk_texts: Sequence[str], context_texts=None) -> np.ndarray:
        if context_texts is None:
            raise ValueError("CoTrainedEmbedder needs context_texts for chunks")
        cb, _ = encode_texts(self.params, list(chunk_texts), zero_policy="zero")
        situated_inputs = [
            self.situated_text(c, ctx) for c, ctx in zip(chunk_texts, context_texts)
        ]
        cs, _ = encode_texts(self.params, situated_inputs, zero_policy="zero")
        return cb + cs

    def fingerprint(self) -> str:
        return f"cotrained:{self.params.fingerprint()}:{self.situated_template}"


# ---------------------------------------------------------------------------
# data preparation


def _instances(pairs: Sequence[QueryChunkPair], n_negatives: int):
    """Flatten pairs into (query, gold_id, context_window, negatives) rows.

    Pairs contribute one instance per gold chunk. Pairs without enough
    negatives are dropped with a warning rather than padded.
    """
    rows = []
    dropped = 0
    for pair in pairs:
        if len(pair.negatives) < n_negatives:
            dropped += 1
            continue
        negs = pair.negatives[:n_negatives]
        for gold, ctx in zip(pair.gold_chunk_ids, pair.contexts):
            rows.append((pair.query_text, gold, ctx, negs))
    if dropped:
        logger.warning(
            "dropped %d pair(s) with fewer than %d negatives", dropped, n_negatives
        )
    if not rows:
        raise ValueError("no usable training instances (check negative counts)")
    return rows


def prepare_margin_data(
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    feature_dim: int,
    n_negatives: int = 10,
    situated: bool = False,
    base: EncoderParams | None = None,
    situated_template: str = "chunk+context",
    context_multiple: int = 16,
    eos_sentinel: str = DEFAULT_EOS_SENTINEL,
) -> MarginData:
    """Featurize pairs for the margin regime.

    Stage 1 (situated=False): the trainable tower sees bare chunk texts.
    Stage 2 (situated=True, base given): the trainable tower sees situated
    renderings, and frozen base embeddings ride along as additive offsets.
    """
    if situated and base is None:
        raise ValueError("situated data needs the frozen base params")
    rows = _instances(pairs, n_negatives)

    queries = [r[0] for r in rows]
    pos_chunk_texts = [corpus.chunk_text(r[1]) for r in rows]
    neg_ids = [cid for r in rows for cid in r[3]]
    neg_chunk_texts = [corpus.chunk_text(cid) for cid in neg_ids]

    def render(chunk: str, context: str) -> str:
        rendered = assemble_input(
            {"chunk": chunk, "context": context}, situated_template, eos_sentinel=eos_sentinel
        )
        if rendered.mode == "dual-eos":
            return rendered.text[: rendered.pooling_marks[1]]
        return rendered.text

    if situated:
        pos_inputs = [
            render(chunk, r[2].context_text) for chunk, r in zip(pos_chunk_texts, rows)
        ]
        neg_ctx = {
            cid: situated_context_of(cid, corpus, context_multiple).context_text
            for cid in set(neg_ids)
        }
        neg_inputs = [render(t, neg_ctx[cid]) for t, cid in zip(neg_chunk_texts, neg_ids)]
    else:
        pos_inputs = pos_chunk_texts
        neg_inputs = neg_chunk_texts

    data = MarginData(
        Xq=featurize_texts(queries, feature_dim),
        Xpos=featurize_texts(pos_inputs, feature_dim),
        Xneg=featurize_texts(neg_inputs, feature_dim),
        n_negatives=n_negatives,
    )
    if base is not None:
        data.base_q, _ = encode_texts(base, queries, zero_policy="zero")
        data.base_pos, _ = encode_texts(base, pos_chunk_texts, zero_policy="zero")
        data.base_neg, _ = encode_texts(base, neg_chunk_texts, zero_policy="zero")
    return data


def prepare_co_training_data(
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    feature_dim: int,
    n_negatives: int = 13,
    situated_template: str = "dual-eos",
    context_multiple: int = 16,
    eos_sentinel: str = DEFAULT_EOS_SENTINEL,
) -> CoTrainingData:
    """Featurize pairs for the co-training regime (positive at slot 0)."""
    rows = _instances(pairs, n_negatives)
    queries = [r[0] for r in rows]

    def render(chunk: str, context: str) -> str:
        rendered = assemble_input(
            {"chunk": chunk, "context": context}, situated_template, eos_sentinel=eos_sentinel
        )
        if rendered.mode == "dual-eos":
            return rendered.text[: rendered.pooling_marks[1]]
        return rendered.text

    neg_ctx_cache: dict = {}

    def neg_context(cid) -> str:
        if cid not in neg_ctx_cache:
            neg_ctx_cache[cid] = situated_context_of(cid, corpus, context_multiple).context_text
        return neg_ctx_cache[cid]

    chunk_view: list[str] = []
    situated_view: list[str] = []
    for query_text, gold, ctx, negs in rows:
        gold_text = corpus.chunk_text(gold)
        chunk_view.append(gold_text)
        situated_view.append(render(gold_text, ctx.context_text))
        for cid in negs:
            t = corpus.chunk_text(cid)
            chunk_view.append(t)
            situated_view.append(render(t, neg_context(cid)))

    return CoTrainingData(
        Xq=featurize_texts(queries, feature_dim),
        Xcand_chunk=featurize_texts(chunk_view, feature_dim),
        Xcand_situated=featurize_texts(situated_view, feature_dim),
        n_candidates=1 + n_negatives,
    )


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    params: EncoderParams
    log: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_dev_recall: float | None = None
    stopped_early: bool = False


def _make_dev_eval(
    dev_pairs: Sequence[QueryChunkPair] | None,
    corpus: Corpus,
    embedder_factory: Callable[[np.ndarray], object],
    context_multiple: int,
) -> Callable[[np.ndarray], float] | None:
    if not dev_pairs:
        return None

    def run(W: np.ndarray) -> float:
        from .evaluation import evaluate_pairs

        report = evaluate_pairs(
            embedder_factory(W), dev_pairs, corpus, ks=(10,), context_multiple=context_multiple
        )
        return report.aggregates["recall@10"]

    return run


def _sgd(
    data,
    grad_fn: Callable,
    cfg: TrainingConfig,
    init: EncoderParams,
    dev_eval: Callable[[np.ndarray], float] | None,
) -> TrainResult:
    """Deterministic SGD with optional momentum and dev early stopping."""
    W = init.weights.copy()
    velocity = np.zeros_like(W)
    rng = np.random.default_rng(cfg.seed)
    n = data.n_pairs
    batch_size = cfg.batch_size if 0 < cfg.batch_size < n else 0
    order = np.arange(n)
    cursor = 0

    result = TrainResult(params=EncoderParams(W, seed=cfg.seed))
    best_W = W.copy()
    best = (-1.0, 0)
    evals_since_best = 0

    for step in range(1, cfg.max_steps + 1):
        if batch_size:
            if cursor + batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            batch = data.subset(order[cursor : cursor + batch_size])
            cursor += batch_size
        else:
            batch = data
        loss, grad = grad_fn(W, batch)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(
                f"non-finite loss/gradient at step {step} for batch {batch.fingerprint()}"
            )
        velocity = cfg.momentum * velocity - cfg.lr * grad
        W = W + velocity
        entry = {"step": step, "loss": loss}

        if dev_eval is not None and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            r10 = dev_eval(W)
            entry["dev_recall@10"] = r10
            if r10 > best[0]:
                best = (r10, step)
                best_W = W.copy()
                evals_since_best = 0
            else:
                evals_since_best += 1
            result.log.append(entry)
            if evals_since_best >= cfg.patience:
                result.stopped_early = True
                break
            continue
        result.log.append(entry)

    if dev_eval is not None and best[1] > 0:
        result.params = EncoderParams(best_W, seed=cfg.seed)
        result.best_step = best[1]
        result.best_dev_recall = best[0]
    else:
        result.params = EncoderParams(W, seed=cfg.seed)
        result.best_step = result.log[-1]["step"] if result.log else 0
    return result


def train_base(
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    cfg: TrainingConfig,
    feature_dim: int,
    embed_dim: int,
    dev_pairs: Sequence[QueryChunkPair] | None = None,
    init: EncoderParams | None = None,
) -> TrainResult:
    """Stage 1: train the chunk-only tower with the margin loss."""
    if cfg.regime != "margin-residual":
        raise ValueError("train_base runs the margin-residual regime")
    if not pairs:
        raise ValueError("empty training pairs")
    data = prepare_margin_data(
        pairs, corpus, feature_dim, n_negatives=cfg.negatives_per_query, situated=False
    )
    start = init if init is not None else init_params(feature_dim, embed_dim, seed=cfg.seed)
    grad_fn = lambda W, batch: margin_gradient(W, batch, cfg.margin, cfg.temperature)
    dev = _make_dev_eval(
        dev_pairs, corpus, lambda W: SingleEncoderEmbedder(EncoderParams(W)), cfg.context_multiple
    )
    return _sgd(data, grad_fn, cfg, start, dev)


def train_residual(
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    base: EncoderParams,
    cfg: TrainingConfig,
    dev_pairs: Sequence[QueryChunkPair] | None = None,
    init: EncoderParams | None = None,
    situated_template: str = "chunk+context",
) -> TrainResult:
    """Stage 2: train the situated tower with the base frozen.

    The loss is the same margin objective, applied to composed embeddings;
    gradients never touch the base weights.
    """
    if cfg.regime != "margin-residual":
        raise ValueError("train_residual runs the margin-residual regime")
    if not pairs:
        raise ValueError("empty training pairs")
    data = prepare_margin_data(
        pairs,
        corpus,
        base.feature_dim,
        n_negatives=cfg.negatives_per_query,
        situated=True,
        base=base,
        situated_template=situated_template,
        context_multiple=cfg.context_multiple,
        eos_sentinel=cfg.eos_sentinel,
    )
    start = init if init is not None else init_params(base.feature_dim, base.embed_dim, seed=cfg.seed + 1)
    if start.dims != base.dims:
        raise ValueError(f"situated tower dims {start.dims} must match base {base.dims}")
    grad_fn = lambda W, batch: margin_gradient(W, batch, cfg.margin, cfg.temperature)
    dev = _make_dev_eval(
        dev_pairs,
        corpus,
        lambda W: ComposedEmbedder(
            base,
            EncoderParams(W),
            situated_template=situated_template,
            eos_sentinel=cfg.eos_sentinel,
        ),
        cfg.context_multiple,
    )
    return _sgd(data, grad_fn, cfg, start, dev)


def train_cotrained(
    pairs: Sequence[QueryChunkPair],
    corpus: Corpus,
    cfg: TrainingConfig,
    feature_dim: int,
    embed_dim: int,
    dev_pairs: Sequence[QueryChunkPair] | None = None,
    init: EncoderParams | None = None,
    situated_template: str = "dual-eos",
) -> TrainResult:
    """Single-tower co-training against the three score channels."""
    if cfg.regime != "co-training":
        raise ValueError("train_cotrained runs the co-training regime")
    if not pairs:
        raise ValueError("empty training pairs")
    data = prepare_co_training_data(
        pairs,
        corpus,
        feature_dim,
        n_negatives=cfg.negatives_per_query,
        situated_template=situated_template,
        context_multiple=cfg.context_multiple,
        eos_sentinel=cfg.eos_sentinel,
    )
    start = init if init is not None else init_params(feature_dim, embed_dim, seed=cfg.seed)
    grad_fn = lambda W, batch: co_training_gradient(W, batch, cfg.temperature)
    dev = _make_dev_eval(
        dev_pairs,
        corpus,
        lambda W: CoTrainedEmbedder(
            EncoderParams(W), situated_template=situated_template, eos_sentinel=cfg.eos_sentinel
        ),
        cfg.context_multiple,
    )
    return _sgd(data, grad_fn, cfg, start, dev)


# ---------------------------------------------------------------------------
# checkpoint and log files

_CKPT_MAGIC = b"SITEMB01"


def save_checkpoint(
    path: str | Path,
    params: EncoderParams,
    regime: str = "margin-residual",
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """Binary checkpoint: magic, JSON header, then row-major float64 LE weights."""
    header = {
        "feature_dim": params.feature_dim,
        "embed_dim": params.embed_dim,
        "regime": regime,
        "seed": params.seed,
        "step": step,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(params.weights, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len))
        F, d = header["feature_dim"], header["embed_dim"]
        buf = f.read(F * d * 8)
        if len(buf) != F * d * 8:
            raise ValueError(f"{path}: truncated weights ({len(buf)} bytes)")
        weights = np.frombuffer(buf, dtype="<f8").reshape(F, d).copy()
    return EncoderParams(weights, seed=header.get("seed", 0)), header


def write_training_log(path: str | Path, log: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in log:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def read_training_log(path: str | Path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out
