"""Wire message shapes: request validation and reply assembly.

Every reply carries proto and echoes the request id, including error
replies, because clients match responses to requests by id before they
even look at the error field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROTO_VERSION = 1

PLAIN_MODES = ("query", "chunk", "chunk+context", "chunk+summary")
DUAL_MODE = "dual-eos"
HEALTH_MODE = "health"


@dataclass
class EncodeRequest:
    request_id: str
    mode: str
    texts: list[str]
    marks: list[tuple[int, int]] | None = None

    @property
    def dual(self) -> bool:
        return self.mode == DUAL_MODE


def error_reply(request_id, message: str) -> dict:
    return {"proto": PROTO_VERSION, "id": request_id, "error": message}


def validate_payload(payload) -> tuple[str, object]:
    """Classify one request as ("health", id), ("encode", EncodeRequest),
    or ("error", reply dict)."""
    if not isinstance(payload, dict):
        return "error", error_reply(None, "request must be a JSON object")
    request_id = payload.get("id")
    if payload.get("proto") != PROTO_VERSION:
        return "error", error_reply(request_id, f"unsupported proto {payload.get('proto')!r}")
    mode = payload.get("mode")
    if mode == HEALTH_MODE:
        return "health", request_id
    if not isinstance(request_id, str) or not request_id:
        return "error", error_reply(request_id, "missing request id")
    if mode not in PLAIN_MODES and mode != DUAL_MODE:
        return "error", error_reply(request_id, f"unknown mode {mode!r}")
    texts = payload.get("texts")
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        return "error", error_reply(request_id, "texts must be a list of strings")
    if not texts:
        return "error", error_reply(request_id, "empty batch")

    marks: list[tuple[int, int]] | None = None
    if mode == DUAL_MODE:
        raw_marks = payload.get("marks")
        if not isinstance(raw_marks, list) or len(raw_marks) != len(texts):
            return "error", error_reply(request_id, "dual-eos needs one [start, end] mark pair per text")
        marks = []
        for pair in raw_marks:
            if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
                return "error", error_reply(request_id, "each mark entry must be two integers")
            marks.append((pair[0], pair[1]))

    return "encode", EncodeRequest(request_id, mode, list(texts), marks)


def finalize_vector(vec: np.ndarray, normalize: bool) -> list[float]:
    if normalize:
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec = np.zeros_like(vec)
            vec[0] = 1.0
        else:
            vec = vec / norm
    return [float(v) for v in vec]


def build_reply(
    request: EncodeRequest,
    dim: int,
    vectors: list[list[float] | None],
    item_errors: list[dict],
) -> dict:
    reply = {
        "proto": PROTO_VERSION,
        "id": request.request_id,
        "dim": dim,
        "vectors": vectors,
    }
    if item_errors:
        reply["errors"] = item_errors
    return reply
