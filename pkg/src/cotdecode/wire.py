"""Schema helpers for the remote logits wire protocol.

One definition of the JSON contract, shared by the HTTP client backend and
by protocol conformance tests (which also run against third-party servers).
All endpoints speak UTF-8 JSON; non-200 responses carry ``{"error": str}``.
"""

from __future__ import annotations

from typing import Any, Mapping

TOKENIZE_PATH = "/v1/tokenize"
DETOKENIZE_PATH = "/v1/detokenize"
NEXT_TOKEN_PATH = "/v1/next_token"
MODEL_INFO_PATH = "/v1/model_info"


class WireFormatError(ValueError):
    """A response does not conform to the wire protocol schema."""


def _require(payload: Mapping[str, Any], field: str, kinds: tuple[type, ...]) -> Any:
    if field not in payload:
        raise WireFormatError(f"missing field {field!r}")
    value = payload[field]
    if not isinstance(value, kinds) or isinstance(value, bool) and bool not in kinds:
        raise WireFormatError(f"field {field!r} has wrong type {type(value).__name__}")
    return value


def validate_tokenize_response(payload: Mapping[str, Any]) -> None:
    ids = _require(payload, "token_ids", (list,))
    texts = _require(payload, "token_texts", (list,))
    if len(ids) != len(texts):
        raise WireFormatError("token_ids and token_texts lengths differ")
    if not all(isinstance(i, int) and i >= 0 for i in ids):
        raise WireFormatError("token_ids must be non-negative integers")
    if not all(isinstance(t, str) for t in texts):
        raise WireFormatError("token_texts must be strings")


def validate_detokenize_response(payload: Mapping[str, Any]) -> None:
    _require(payload, "text", (str,))


def validate_model_info(payload: Mapping[str, Any]) -> None:
    _require(payload, "name", (str,))
    vocab_size = _require(payload, "vocab_size", (int,))
    eos_id = _require(payload, "eos_id", (int,))
    max_context = _require(payload, "max_context", (int,))
    if vocab_size < 1:
        raise WireFormatError("vocab_size must be positive")
    if not 0 <= eos_id < vocab_size:
        raise WireFormatError("eos_id outside vocabulary")
    if max_context < 1:
        raise WireFormatError("max_context must be positive")


def validate_next_token_response(payload: Mapping[str, Any], *, sum_tol: float = 1e-4) -> None:
    """Check a /v1/next_token body: entry shape, descending order, mass balance.

    ``sum_tol`` is looser than the exact-arithmetic backends use because real
    servers compute softmax in 32-bit floats and round serialized digits.
    """
    entries = _require(payload, "entries", (list,))
    truncated = _require(payload, "truncated_mass", (int, float))
    _require(payload, "eos_id", (int,))
    if not entries:
        raise WireFormatError("entries must be non-empty")
    total = 0.0
    prev = float("inf")
    for n, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise WireFormatError(f"entry {n} is not an object")
        token_id = _require(entry, "id", (int,))
        _require(entry, "text", (str,))
        prob = float(_require(entry, "prob", (int, float)))
        if token_id < 0:
            raise WireFormatError(f"entry {n}: negative token id")
        if not 0.0 <= prob <= 1.0 + sum_tol:
            raise WireFormatError(f"entry {n}: prob {prob} outside [0, 1]")
        if prob > prev + sum_tol:
            raise WireFormatError(f"entry {n}: probs not sorted descending")
        prev = prob
        total += prob
    if not -sum_tol <= float(truncated) <= 1.0 + sum_tol:
        raise WireFormatError(f"truncated_mass {truncated} outside [0, 1]")
    if abs(total + float(truncated) - 1.0) > sum_tol:
        raise WireFormatError(
            f"probability mass {total} + truncated {truncated} not ~1 (tol {sum_tol})"
        )
