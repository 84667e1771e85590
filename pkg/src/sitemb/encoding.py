"""Encoder inputs, the built-in hashed linear encoder, and the wire bridge.

Three layers live here. Template assembly renders (chunk, context, query)
material into byte-stable encoder inputs. The toy encoder turns text into
unit-norm embeddings via hashed bag-of-words features and a linear map, small
enough that its gradients are exactly checkable. The bridge client speaks a
versioned JSON protocol to external encoder processes over HTTP or stdio.
"""

from __future__ import annotations

import json
import logging
import select
import shlex
import subprocess
import threading
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .util import sha256_bytes, stable_digest

logger = logging.getLogger(__name__)

DEFAULT_FEATURE_DIM = 4096
DEFAULT_EMBED_DIM = 32
MIN_FEATURE_DIM = 64

# Frozen template text. These strings are load-bearing: downstream encoders
# see them byte for byte, and golden tests pin them.
CONTEXT_DELIMITER = "</s>"
SUMMARY_DELIMITER = "\n\n"
DEFAULT_EOS_SENTINEL = "<|endoftext|>"

QUERY_INSTRUCTION = (
    "Given a user note query, retrieve the passages that are most relevant "
    "to the content or context described in the query."
)

PASSAGE_PROMPT_PREAMBLE = (
    "Your task is to embed passages for retrieval. Your input consists of the "
    "target passage and its context. You need to find relevant information "
    "from the context to enhance the target passage embedding such that it "
    "captures the meanings of the passages situated within the context."
)

SITUATING_INSTRUCTION = (
    "The context in which the chunk is situated is given below. "
    "Please encode the chunk by being aware of the context. Context:\n"
)

MODES = ("query", "chunk", "chunk+context", "chunk+summary", "dual-eos")


@dataclass(frozen=True)
class EncoderInput:
    """Rendered text ready for an encoder, with pooling marks for dual-eos."""

    text: str
    mode: str
    pooling_marks: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.mode == "dual-eos":
            if len(self.pooling_marks) != 2 or not (
                0 <= self.pooling_marks[0] < self.pooling_marks[1] <= len(self.text)
            ):
                raise ValueError(
                    "dual-eos inputs need exactly two ascending pooling marks, "
                    f"got {self.pooling_marks}"
                )
        elif self.pooling_marks:
            raise ValueError(f"mode {self.mode!r} takes no pooling marks")


def _require(material: Mapping[str, str], template_id: str, *fields: str) -> list[str]:
    out = []
    for f in fields:
        if f not in material:
            raise ValueError(f"template {template_id!r} requires field {f!r}")
        out.append(material[f])
    return out


def assemble_input(
    material: Mapping[str, str],
    template_id: str,
    eos_sentinel: str = DEFAULT_EOS_SENTINEL,
) -> EncoderInput:
    """Render material into an EncoderInput under a named template.

    Renderings are byte-exact and stable across runs. The dual-eos template
    places one pooling mark at the start of each sentinel, so that the text
    before the first mark is exactly the chunk.
    """
    if template_id == "query":
        (query,) = _require(material, template_id, "query")
        return EncoderInput(query, "query")
    if template_id == "instructed-query":
        (query,) = _require(material, template_id, "query")
        instruction = material.get("instruction", QUERY_INSTRUCTION)
        return EncoderInput(f"Instruct:\n{instruction}\n\nQuery:\n{query}", "query")
    if template_id == "chunk-only":
        (chunk,) = _require(material, template_id, "chunk")
        return EncoderInput(chunk, "chunk")
    if template_id == "chunk+context":
        chunk, context = _require(material, template_id, "chunk", "context")
        return EncoderInput(f"{chunk}{CONTEXT_DELIMITER}{context}", "chunk+context")
    if template_id == "chunk+summary":
        chunk, summary = _require(material, template_id, "chunk", "summary")
        return EncoderInput(f"{chunk}{SUMMARY_DELIMITER}{summary}", "chunk+summary")
    if template_id == "context-aware-passage":
        chunk, context = _require(material, template_id, "chunk", "context")
        text = f"{PASSAGE_PROMPT_PREAMBLE}\n\ncontext:\n{context}\n\npassage:\n{chunk}"
        return EncoderInput(text, "chunk+context")
    if template_id == "dual-eos":
        chunk, context = _require(material, template_id, "chunk", "context")
        text = f"{chunk}{eos_sentinel}{SITUATING_INSTRUCTION}{context}{eos_sentinel}"
        marks = (len(chunk), len(text) - len(eos_sentinel))
        return EncoderInput(text, "dual-eos", marks)
    raise ValueError(f"unknown template {template_id!r} (known: {template_ids()})")


def template_ids() -> tuple[str, ...]:
    return (
        "query",
        "instructed-query",
        "chunk-only",
        "chunk+context",
        "chunk+summary",
        "context-aware-passage",
        "dual-eos",
    )


# ---------------------------------------------------------------------------
# toy featurizer


@lru_cache(maxsize=1 << 20)
def _bucket(kind: str, a: str, b: str, feature_dim: int) -> int:
    digest = stable_digest(kind, a, b)
    return int.from_bytes(digest[:8], "little") % feature_dim


def _feature_indices(text: str, feature_dim: int) -> list[int]:
    tokens = text.lower().split()
    idx = [_bucket("u", tok, "", feature_dim) for tok in tokens]
    n = len(tokens)
    # Bigrams wrap around (last token pairs with the first). The wraparound
    # keeps featurize(s + " " + s) exactly twice featurize(s), so repetition
    # preserves direction and cosine similarity sees through it.
    idx.extend(_bucket("b", tokens[i], tokens[(i + 1) % n], feature_dim) for i in range(n))
    return idx


def toy_featurize(text: str, feature_dim: int = DEFAULT_FEATURE_DIM) -> sp.csr_matrix:
    """Hash word unigrams and cyclic bigrams into a 1 x F count vector.

    Bucketing uses a keyed stable digest, never the process-salted builtin
    hash, so feature vectors are identical across runs and platforms. Counts
    are non-negative; empty text gives the zero vector.
    """
    return featurize_texts([text], feature_dim)


def featurize_texts(texts: Sequence[str], feature_dim: int = DEFAULT_FEATURE_DIM) -> sp.csr_matrix:
    """Featurize a batch into a B x F CSR count matrix."""
    if feature_dim < MIN_FEATURE_DIM:
        raise ValueError(f"feature_dim must be >= {MIN_FEATURE_DIM}, got {feature_dim}")
    rows: list[int] = []
    cols: list[int] = []
    for r, text in enumerate(texts):
        indices = _feature_indices(text, feature_dim)
        rows.extend([r] * len(indices))
        cols.extend(indices)
    mat = sp.coo_matrix(
        (np.ones(len(cols), dtype=np.float64), (rows, cols)),
        shape=(len(texts), feature_dim),
    ).tocsr()
    mat.sum_duplicates()
    return mat


# ---------------------------------------------------------------------------
# toy encoder


@dataclass
class EncoderParams:
    """Weights of one linear encoder tower (F x d) plus its init seed."""

    weights: np.ndarray
    seed: int = 0

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"weights must be 2-d, got shape {w.shape}")
        if w.shape[1] < 2:
            raise ValueError(f"embed_dim must be >= 2, got {w.shape[1]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights contain non-finite entries")
        self.weights = w

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.weights.shape  # type: ignore[return-value]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.weights.copy(), self.seed)

    def fingerprint(self) -> str:
        """Short content hash of the weights, for report provenance."""
        payload = repr(self.weights.shape).encode() + self.weights.tobytes()
        return sha256_bytes(payload)[:12]


def init_params(
    feature_dim: int = DEFAULT_FEATURE_DIM,
    embed_dim: int = DEFAULT_EMBED_DIM,
    seed: int = 0,
    scale: float | None = None,
) -> EncoderParams:
    """Gaussian init, scaled so embeddings start in a sane numeric range."""
    rng = np.random.default_rng(seed)
    if scale is None:
        scale = 1.0 / np.sqrt(embed_dim)
    w = rng.standard_normal((feature_dim, embed_dim)) * scale
    return EncoderParams(w, seed=seed)


def zero_params(
    feature_dim: int = DEFAULT_FEATURE_DIM,
    embed_dim: int = DEFAULT_EMBED_DIM,
) -> EncoderParams:
    """All-zero tower; composing with it reproduces the other tower exactly."""
    return EncoderParams(np.zeros((feature_dim, embed_dim)), seed=0)


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A unit-norm embedding as emitted by an encoder."""

    values: np.ndarray
    norm: float
    flags: tuple[str, ...] = ()


def basis_vector(dim: int) -> np.ndarray:
    e = np.zeros(dim)
    e[0] = 1.0
    return e


def normalize_rows(raw: np.ndarray, zero_policy: str = "zero") -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a matrix; returns (normalized, zero_row_mask).

    zero_policy selects what a zero row becomes: "zero" keeps it (used inside
    composed embedders so an all-zero tower contributes nothing), "e1" maps it
    to the first basis vector (used at API emission so callers always get a
    unit vector).
    """
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1)
    zero_mask = norms == 0.0
    safe = np.where(zero_mask, 1.0, norms)
    out = raw / safe[:, None]
    if zero_policy == "e1":
        out[zero_mask] = 0.0
        out[zero_mask, 0] = 1.0
    elif zero_policy != "zero":
        raise ValueError(f"unknown zero_policy {zero_policy!r}")
    return out, zero_mask


def encode_texts(params: EncoderParams, texts: Sequence[str], zero_policy: str = "zero") -> tuple[np.ndarray, np.ndarray]:
    """Embed a batch of raw texts: L2-normalized rows of featurize(texts) @ W."""
    x = featurize_texts(texts, params.feature_dim)
    raw = np.asarray(x @ params.weights)
    return normalize_rows(raw, zero_policy)


def toy_encode(
    params: EncoderParams,
    enc_input: EncoderInput,
) -> EmbeddingVector | tuple[EmbeddingVector, EmbeddingVector]:
    """Embed one EncoderInput with the linear toy encoder.

    Dual-eos inputs yield two vectors. The first is pooled at the chunk
    sentinel and is computed from the text before that mark only, so it is
    bitwise equal to encoding the bare chunk; the second sees the text up to
    the closing sentinel, which includes the context.
    """
    if enc_input.mode == "dual-eos":
        m1, m2 = enc_input.pooling_marks
        return (
            _encode_one(params, enc_input.text[:m1]),
            _encode_one(params, enc_input.text[:m2]),
        )
    return _encode_one(params, enc_input.text)


def _encode_one(params: EncoderParams, text: str) -> EmbeddingVector:
    x = featurize_texts([text], params.feature_dim)
    flags: tuple[str, ...] = ()
    if x.nnz == 0:
        flags = ("zero-features",)
    raw = np.asarray(x @ params.weights)
    normalized, zero_mask = normalize_rows(raw, zero_policy="e1")
    if zero_mask[0] and not flags:
        flags = ("zero-embedding",)
    v = normalized[0]
    return EmbeddingVector(values=v, norm=float(np.linalg.norm(v)), flags=flags)


# ---------------------------------------------------------------------------
# bridge protocol client

PROTO_VERSION = 1


class BridgeError(Exception):
    """Base class for bridge failures."""


class BridgeTimeout(BridgeError):
    pass


class BridgeProtocolError(BridgeError):
    """Malformed, mismatched, or non-JSON response."""


class BridgeDimensionError(BridgeError):
    """Vectors of inconsistent dimension within one response."""


class BridgeItemError(BridgeError):
    """The adapter reported per-item failures inside an otherwise valid batch."""

    def __init__(self, message: str, item_errors: list[dict], partial: list):
        super().__init__(message)
        self.item_errors = item_errors
        self.partial = partial


class BridgeClient:
    """Client for the encoder bridge protocol over HTTP or stdio.

    Endpoints: "http://host:port" posts one JSON body per batch;
    "stdio:<command>" spawns the command and exchanges newline-framed JSON on
    its stdin/stdout. At most max_in_flight encode calls run concurrently.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        normalize: bool = True,
        max_in_flight: int = 4,
    ):
        if not (endpoint.startswith("http://") or endpoint.startswith("https://") or endpoint.startswith("stdio:")):
            raise ValueError(f"endpoint must be http(s):// or stdio:, got {endpoint!r}")
        self.endpoint = endpoint
        self.timeout = timeout
        self.normalize = normalize
        self._slots = threading.Semaphore(max_in_flight)
        self._proc: subprocess.Popen | None = None
        self._proc_lock = threading.Lock()

    # -- transport ----------------------------------------------------------

    def _post_http(self, payload: dict) -> dict:
        url = self.endpoint.rstrip("/") + "/encode"
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            raise BridgeProtocolError(f"HTTP {exc.code} from {url}: {exc.read()[:200]!r}") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, TimeoutError):
                raise BridgeTimeout(f"timeout after {self.timeout}s talking to {url}") from exc
            raise BridgeProtocolError(f"cannot reach {url}: {exc.reason}") from exc
        except TimeoutError as exc:
            raise BridgeTimeout(f"timeout after {self.timeout}s talking to {url}") from exc
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BridgeProtocolError(f"non-JSON response from {url}: {raw[:200]!r}") from exc

    def _stdio_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            cmd = shlex.split(self.endpoint[len("stdio:") :])
            self._proc = subprocess.Popen(
                cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def _post_stdio(self, payload: dict) -> dict:
        with self._proc_lock:
            proc = self._stdio_proc()
            assert proc.stdin is not None and proc.stdout is not None
            proc.stdin.write(json.dumps(payload) + "\n")
            proc.stdin.flush()
            ready, _, _ = select.select([proc.stdout], [], [], self.timeout)
            if not ready:
                raise BridgeTimeout(f"timeout after {self.timeout}s waiting on {self.endpoint!r}")
            line = proc.stdout.readline()
        if not line:
            raise BridgeProtocolError(f"adapter at {self.endpoint!r} closed its stdout")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise BridgeProtocolError(f"non-JSON line from adapter: {line[:200]!r}") from exc

    def _roundtrip(self, payload: dict) -> dict:
        if self.endpoint.startswith("stdio:"):
            return self._post_stdio(payload)
        return self._post_http(payload)

    # -- protocol -----------------------------------------------------------

    def health(self) -> dict:
        """Probe the adapter; returns its {proto, dim} announcement."""
        if self.endpoint.startswith("stdio:"):
            reply = self._roundtrip({"proto": PROTO_VERSION, "id": uuid.uuid4().hex, "mode": "health", "texts": []})
        else:
            url = self.endpoint.rstrip("/") + "/health"
            try:
                with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                    reply = json.loads(resp.read())
            except (urllib.error.URLError, TimeoutError) as exc:
                raise BridgeProtocolError(f"health probe failed for {url}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise BridgeProtocolError(f"non-JSON health reply from {url}") from exc
        if reply.get("proto") != PROTO_VERSION or "dim" not in reply:
            raise BridgeProtocolError(f"bad health reply: {reply!r}")
        return reply

    def encode(
        self, batch: Sequence[EncoderInput]
    ) -> list[EmbeddingVector] | list[tuple[EmbeddingVector, EmbeddingVector]]:
        """Send one batch; returns vectors in request order.

        All inputs must share one mode. Dual-eos batches return a pair of
        vectors per item (chunk view, situated view).
        """
        if not batch:
            raise ValueError("batch must be non-empty")
        modes = {b.mode for b in batch}
        if len(modes) != 1:
            raise ValueError(f"batch mixes modes {sorted(modes)}; send one mode per batch")
        mode = batch[0].mode
        request_id = uuid.uuid4().hex
        payload: dict = {
            "proto": PROTO_VERSION,
            "id": request_id,
            "mode": mode,
            "texts": [b.text for b in batch],
        }
        if mode == "dual-eos":
            payload["marks"] = [list(b.pooling_marks) for b in batch]

        with self._slots:
            reply = self._roundtrip(payload)

        return self._parse_reply(reply, request_id, mode, len(batch))

    def _parse_reply(self, reply: dict, request_id: str, mode: str, n_items: int) -> list:
        if not isinstance(reply, dict) or reply.get("proto") != PROTO_VERSION:
            raise BridgeProtocolError(f"missing/unknown proto in reply: {reply!r}")
        if reply.get("id") != request_id:
            raise BridgeProtocolError(
                f"response id {reply.get('id')!r} does not match request {request_id!r}"
            )
        if "error" in reply:
            raise BridgeProtocolError(f"adapter error: {reply['error']}")
        try:
            dim = int(reply["dim"])
            vectors = reply["vectors"]
        except (KeyError, TypeError, ValueError) as exc:
            raise BridgeProtocolError(f"reply lacks dim/vectors: {reply!r}") from exc

        expected = n_items * 2 if mode == "dual-eos" else n_items
        if not isinstance(vectors, list) or len(vectors) != expected:
            raise BridgeProtocolError(
                f"expected {expected} vectors for {n_items} items, got "
                f"{len(vectors) if isinstance(vectors, list) else type(vectors).__name__}"
            )

        item_errors = reply.get("errors") or []
        parsed: list[EmbeddingVector | None] = []
        for i, vec in enumerate(vectors):
            if vec is None:
                parsed.append(None)
                continue
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.shape[0] != dim:
                raise BridgeDimensionError(
                    f"vector {i} has shape {arr.shape}, expected ({dim},)"
                )
            parsed.append(self._finalize(arr, i))
        if item_errors or any(v is None for v in parsed):
            raise BridgeItemError(
                f"{len(item_errors)} item error(s) in batch: {item_errors[:3]}",
                item_errors=item_errors,
                partial=parsed,
            )
        if mode == "dual-eos":
            return [(parsed[2 * i], parsed[2 * i + 1]) for i in range(n_items)]
        return parsed

    def _finalize(self, arr: np.ndarray, index: int) -> EmbeddingVector:
        norm = float(np.linalg.norm(arr))
        flags: tuple[str, ...] = ()
        if not self.normalize:
            return EmbeddingVector(values=arr, norm=norm, flags=flags)
        if norm == 0.0:
            logger.warning("bridge vector %d is zero; substituting basis vector", index)
            return EmbeddingVector(values=basis_vector(arr.shape[0]), norm=1.0, flags=("zero-vector",))
        if abs(norm - 1.0) > 1e-6:
            logger.warning("bridge vector %d arrived with norm %.6f; renormalizing", index, norm)
            flags = ("renormalized",)
            arr = arr / norm
        return EmbeddingVector(values=arr, norm=float(np.linalg.norm(arr)), flags=flags)

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            assert self._proc.stdin is not None
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._proc = None

    def __enter__(self) -> "BridgeClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def bridge_encode(
    endpoint: str,
    batch: Sequence[EncoderInput],
    timeout: float = 30.0,
    normalize: bool = True,
) -> list[EmbeddingVector] | list[tuple[EmbeddingVector, EmbeddingVector]]:
    """One-shot convenience wrapper around BridgeClient.encode."""
    with BridgeClient(endpoint, timeout=timeout, normalize=normalize) as client:
        return client.encode(batch)
