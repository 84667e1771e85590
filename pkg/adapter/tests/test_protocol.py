import numpy as np

from encoder_adapter.protocol import (
    EncodeRequest,
    error_reply,
    finalize_vector,
    validate_payload,
)


def _err(payload) -> str:
    kind, value = validate_payload(payload)
    assert kind == "error"
    return value["error"]


def test_rejects_non_object_payload():
    assert "JSON object" in _err(["not", "an", "object"])


def test_rejects_wrong_proto_and_echoes_id():
    kind, value = validate_payload({"proto": 2, "id": "abc", "mode": "chunk", "texts": ["x"]})
    assert kind == "error"
    assert value["id"] == "abc"
    assert value["proto"] == 1
    assert "proto" in value["error"]


def test_health_needs_no_texts():
    kind, rid = validate_payload({"proto": 1, "id": "h1", "mode": "health", "texts": []})
    assert kind == "health"
    assert rid == "h1"


def test_missing_id_is_a_request_error():
    assert "request id" in _err({"proto": 1, "mode": "chunk", "texts": ["x"]})


def test_unknown_mode_is_a_request_error():
    assert "mode" in _err({"proto": 1, "id": "a", "mode": "reverse", "texts": ["x"]})


def test_texts_must_be_strings():
    assert "texts" in _err({"proto": 1, "id": "a", "mode": "chunk", "texts": ["ok", 7]})


def test_empty_batch_is_rejected():
    assert "empty" in _err({"proto": 1, "id": "a", "mode": "chunk", "texts": []})


def test_dual_requires_matching_marks():
    assert "mark" in _err(
        {"proto": 1, "id": "a", "mode": "dual-eos", "texts": ["xy", "zw"], "marks": [[0, 1]]}
    )
    assert "two integers" in _err(
        {"proto": 1, "id": "a", "mode": "dual-eos", "texts": ["xy"], "marks": [[0, 1, 2]]}
    )


def test_valid_dual_payload_parses():
    kind, req = validate_payload(
        {"proto": 1, "id": "a", "mode": "dual-eos", "texts": ["abcd"], "marks": [[1, 3]]}
    )
    assert kind == "encode"
    assert isinstance(req, EncodeRequest)
    assert req.dual and req.marks == [(1, 3)]


def test_valid_plain_payload_parses():
    kind, req = validate_payload({"proto": 1, "id": "a", "mode": "query", "texts": ["q"]})
    assert kind == "encode"
    assert not req.dual and req.marks is None


def test_error_reply_shape():
    reply = error_reply("xyz", "boom")
    assert reply == {"proto": 1, "id": "xyz", "error": "boom"}


def test_finalize_normalizes_to_unit_length():
    out = finalize_vector(np.array([3.0, 4.0]), normalize=True)
    assert abs(sum(v * v for v in out) - 1.0) < 1e-12


def test_finalize_passthrough_when_normalize_off():
    out = finalize_vector(np.array([3.0, 4.0]), normalize=False)
    assert out == [3.0, 4.0]


def test_finalize_zero_vector_falls_back_to_basis():
    out = finalize_vector(np.zeros(4), normalize=True)
    assert out == [1.0, 0.0, 0.0, 0.0]
