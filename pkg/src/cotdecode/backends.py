"""Next-token distribution backends.

Defines the abstract contract all decoding operates against, a deterministic
table-driven toy model used as the ground-truth oracle substrate in tests,
and an HTTP client for the remote logits wire protocol.
"""

from __future__ import annotations

import json
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import requests

from . import wire

__all__ = [
    "BackendError",
    "InvalidSpec",
    "TransportError",
    "TokenEntry",
    "NextTokenDistribution",
    "TableModelSpec",
    "ModelBackend",
    "TableModel",
    "RemoteBackend",
    "build_table_model",
    "load_table_spec",
]


class BackendError(Exception):
    """Base class for backend failures."""


class InvalidSpec(BackendError, ValueError):
    """A table model spec violates its construction invariants."""


class TransportError(BackendError, RuntimeError):
    """A remote backend call failed (HTTP status, connection, or parse)."""

    def __init__(self, message: str, *, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class TokenEntry:
    """One vocabulary candidate at a decoding step: id, surface text, prob."""

    id: int
    text: str
    prob: float


@dataclass(frozen=True)
class NextTokenDistribution:
    """Top-n post-softmax probabilities at one step, sorted descending.

    ``truncated_mass`` is the probability not covered by ``entries``; it is
    tracked explicitly because vocabulary truncation makes entropy-style
    estimates unreliable, while the top-2 margin survives truncation intact.
    """

    entries: tuple[TokenEntry, ...]
    truncated_mass: float

    @property
    def top1(self) -> TokenEntry:
        return self.entries[0]

    @property
    def top2(self) -> TokenEntry | None:
        return self.entries[1] if len(self.entries) > 1 else None

    def validate(self, tol: float = 1e-6) -> None:
        if not self.entries:
            raise ValueError("distribution has no entries")
        total = 0.0
        for prev, cur in zip(self.entries, self.entries[1:]):
            if cur.prob > prev.prob:
                raise ValueError("entries not sorted by descending prob")
            if cur.prob == prev.prob and cur.id < prev.id:
                raise ValueError("equal-prob entries not sorted by ascending id")
        for e in self.entries:
            if not 0.0 <= e.prob <= 1.0:
                raise ValueError(f"prob {e.prob} outside [0, 1]")
            total += e.prob
        if not -tol <= self.truncated_mass <= 1.0 + tol:
            raise ValueError(f"truncated_mass {self.truncated_mass} outside [0, 1]")
        if abs(total + self.truncated_mass - 1.0) > tol:
            raise ValueError(f"mass {total + self.truncated_mass} differs from 1")


@dataclass(frozen=True)
class TableModelSpec:
    """Deterministic toy model: context-suffix rules mapping to token weights.

    ``vocab`` lists token surface strings (one string = one token) and must
    contain the end-of-sequence marker ``eos_text``.  ``rules`` map a context
    suffix of up to ``order`` token ids to ``(token id, weight)`` pairs; the
    longest matching suffix wins, and ``fallback`` applies when none match.
    Weights are normalized into probabilities at query time.
    """

    vocab: tuple[str, ...]
    order: int = 0
    rules: Mapping[tuple[int, ...], tuple[tuple[int, float], ...]] = field(default_factory=dict)
    fallback: tuple[tuple[int, float], ...] = ()
    eos_text: str = "<eos>"

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "TableModelSpec":
        """Build a spec from the JSON file form, which keys rules by token text."""
        vocab = tuple(data["vocab"])
        index = {text: i for i, text in enumerate(vocab)}
        if len(index) != len(vocab):
            raise InvalidSpec("vocab surface strings must be unique")

        def to_pairs(weights: Mapping[str, float], where: str) -> tuple[tuple[int, float], ...]:
            pairs = []
            for text, w in weights.items():
                if text not in index:
                    raise InvalidSpec(f"{where}: unknown token {text!r}")
                pairs.append((index[text], float(w)))
            return tuple(pairs)

        rules: dict[tuple[int, ...], tuple[tuple[int, float], ...]] = {}
        for n, rule in enumerate(data.get("rules", [])):
            context = rule["context"]
            try:
                key = tuple(index[t] for t in context)
            except KeyError as exc:
                raise InvalidSpec(f"rule {n}: unknown context token {exc.args[0]!r}") from None
            rules[key] = to_pairs(rule["weights"], f"rule {n}")
        return TableModelSpec(
            vocab=vocab,
            order=int(data.get("order", 0)),
            rules=rules,
            fallback=to_pairs(data.get("fallback", {}), "fallback"),
            eos_text=data.get("eos", "<eos>"),
        )


def load_table_spec(path: str | Path) -> TableModelSpec:
    with open(path, encoding="utf-8") as fh:
        return TableModelSpec.from_dict(json.load(fh))


class ModelBackend(ABC):
    """What decoding needs from a model: distributions plus a tokenizer.

    Backends are immutable after construction and safe for unlimited
    concurrent callers.
    """

    @property
    @abstractmethod
    def name(self) -> str: ...

    @property
    @abstractmethod
    def vocab_size(self) -> int: ...

    @property
    @abstractmethod
    def eos_id(self) -> int: ...

    @abstractmethod
    def tokenize(self, text: str) -> list[int]: ...

    @abstractmethod
    def detokenize(self, ids: Sequence[int]) -> str: ...

    @abstractmethod
    def next_token_distribution(self, context: Sequence[int], top_n: int) -> NextTokenDistribution:
        """Return the ``top_n`` most probable next tokens after ``context``.

        ``top_n`` must be at least 2: the confidence margin needs the top-2
        probabilities at every step.
        """


def _validate_weights(
    pairs: Sequence[tuple[int, float]], vocab_size: int, where: str
) -> None:
    if not pairs:
        raise InvalidSpec(f"{where}: weight list is empty")
    any_positive = False
    for token_id, weight in pairs:
        if not 0 <= token_id < vocab_size:
            raise InvalidSpec(f"{where}: token id {token_id} outside vocabulary")
        if not weight >= 0.0:
            raise InvalidSpec(f"{where}: negative weight {weight} for token {token_id}")
        if weight > 0.0:
            any_positive = True
    if not any_positive:
        raise InvalidSpec(f"{where}: no strictly positive weight")


class TableModel(ModelBackend):
    """Pure-function toy model over an explicit rule table.

    Identical spec and context always yield bit-identical distributions.
    The tokenizer is the identity over declared vocab strings (greedy
    longest match); the end-of-sequence token renders as the empty string.
    """

    def __init__(self, spec: TableModelSpec):
        if not spec.vocab:
            raise InvalidSpec("vocab is empty")
        if len(set(spec.vocab)) != len(spec.vocab):
            raise InvalidSpec("vocab surface strings must be unique")
        if any(not t for t in spec.vocab):
            raise InvalidSpec("vocab surface strings must be non-empty")
        if spec.eos_text not in spec.vocab:
            raise InvalidSpec(f"vocab has no end-of-sequence marker {spec.eos_text!r}")
        if spec.order < 0:
            raise InvalidSpec("order must be >= 0")
        size = len(spec.vocab)
        for key, pairs in spec.rules.items():
            if len(key) > spec.order:
                raise InvalidSpec(f"rule for context {key}: suffix longer than order {spec.order}")
            if any(not 0 <= t < size for t in key):
                raise InvalidSpec(f"rule for context {key}: context token id outside vocabulary")
            _validate_weights(pairs, size, f"rule for context {key}")
        _validate_weights(spec.fallback, size, "fallback")

        self._spec = spec
        self._vocab = spec.vocab
        self._eos_id = spec.vocab.index(spec.eos_text)
        self._rules = {tuple(k): tuple(v) for k, v in spec.rules.items()}
        self._fallback = tuple(spec.fallback)
        # Longest-first ordering makes greedy tokenization deterministic.
        self._match_order = sorted(
            (i for i in range(size) if i != self._eos_id),
            key=lambda i: (-len(self._vocab[i]), i),
        )

    @property
    def name(self) -> str:
        return "table"

    @property
    def spec(self) -> TableModelSpec:
        return self._spec

    @property
    def vocab_size(self) -> int:
        return len(self._vocab)

    @property
    def eos_id(self) -> int:
        return self._eos_id

    def token_text(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._vocab):
            raise ValueError(f"token id {token_id} outside vocabulary")
        return "" if token_id == self._eos_id else self._vocab[token_id]

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        pos = 0
        while pos < len(text):
            match = None
            for token_id in self._match_order:
                if text.startswith(self._vocab[token_id], pos):
                    match = token_id
                    break
            if match is None:
                raise ValueError(f"cannot tokenize at offset {pos}: {text[pos:pos + 16]!r}")
            ids.append(match)
            pos += len(self._vocab[match])
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        return "".join(self.token_text(i) for i in ids)

    def _weights_for(self, context: Sequence[int]) -> tuple[tuple[int, float], ...]:
        for length in range(min(self._spec.order, len(context)), 0, -1):
            key = tuple(context[-length:])
            pairs = self._rules.get(key)
            if pairs is not None:
                return pairs
        return self._fallback

    def next_token_distribution(self, context: Sequence[int], top_n: int) -> NextTokenDistribution:
        if top_n < 2:
            raise ValueError(f"top_n must be >= 2, got {top_n}")
        size = len(self._vocab)
        for t in context:
            if not 0 <= t < size:
                raise ValueError(f"context token id {t} outside vocabulary")
        probs = [0.0] * size
        pairs = self._weights_for(context)
        total = sum(w for _, w in pairs)
        for token_id, weight in pairs:
            probs[token_id] += weight / total
        ranked = sorted(range(size), key=lambda i: (-probs[i], i))
        kept = ranked[: min(top_n, size)]
        entries = tuple(TokenEntry(i, self.token_text(i), probs[i]) for i in kept)
        truncated = max(0.0, min(1.0, 1.0 - sum(probs[i] for i in kept)))
        return NextTokenDistribution(entries=entries, truncated_mass=truncated)


def build_table_model(spec: TableModelSpec) -> TableModel:
    """Validate ``spec`` and return the deterministic backend it defines."""
    return TableModel(spec)


class RemoteBackend(ModelBackend):
    """Client for the remote logits wire protocol.

    Requests are issued synchronously on per-thread connections, so every
    response is correlated with its request by construction, never by
    arrival order.  Reported probabilities are trusted as post-softmax;
    no client-side renormalization is applied (renormalizing a truncated
    set would distort margins).
    """

    def __init__(
        self,
        base_url: str,
        *,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
    ):
        self._base = base_url.rstrip("/")
        self._timeout = timeout
        self._retries = max(0, retries)
        self._backoff = backoff
        self._local = threading.local()
        info = self._request("GET", wire.MODEL_INFO_PATH, None)
        try:
            wire.validate_model_info(info)
        except wire.WireFormatError as exc:
            raise TransportError(f"malformed model_info response: {exc}") from exc
        self._name = info["name"]
        self._vocab_size = info["vocab_size"]
        self._eos_id = info["eos_id"]
        self._max_context = info["max_context"]

    @property
    def name(self) -> str:
        return self._name

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    @property
    def eos_id(self) -> int:
        return self._eos_id

    @property
    def max_context(self) -> int:
        return self._max_context

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def _request(self, method: str, path: str, payload: Mapping[str, Any] | None) -> dict:
        url = self._base + path
        last_error: Exception | None = None
        for attempt in range(self._retries + 1):
            if attempt:
                time.sleep(self._backoff * (2 ** (attempt - 1)))
            try:
                response = self._session().request(
                    method, url, json=payload, timeout=self._timeout
                )
            except requests.RequestException as exc:
                last_error = TransportError(f"{method} {path}: {exc}")
                continue
            if response.status_code == 200:
                try:
                    body = response.json()
                except ValueError as exc:
                    raise TransportError(f"{method} {path}: invalid JSON body") from exc
                if not isinstance(body, dict):
                    raise TransportError(f"{method} {path}: response is not an object")
                return body
            detail = ""
            try:
                detail = response.json().get("error", "")
            except ValueError:
                detail = response.text[:200]
            error = TransportError(
                f"{method} {path}: HTTP {response.status_code} {detail}".rstrip(),
                status=response.status_code,
            )
            if response.status_code >= 500:
                last_error = error
                continue
            raise error
        assert last_error is not None
        raise last_error

    def tokenize(self, text: str) -> list[int]:
        body = self._request("POST", wire.TOKENIZE_PATH, {"text": text})
        try:
            wire.validate_tokenize_response(body)
        except wire.WireFormatError as exc:
            raise TransportError(f"malformed tokenize response: {exc}") from exc
        return list(body["token_ids"])

    def detokenize(self, ids: Sequence[int]) -> str:
        self._check_ids(ids)
        body = self._request("POST", wire.DETOKENIZE_PATH, {"token_ids": list(ids)})
        try:
            wire.validate_detokenize_response(body)
        except wire.WireFormatError as exc:
            raise TransportError(f"malformed detokenize response: {exc}") from exc
        return body["text"]

    def _check_ids(self, ids: Sequence[int]) -> None:
        for t in ids:
            if not 0 <= t < self._vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {self._vocab_size}")

    def next_token_distribution(self, context: Sequence[int], top_n: int) -> NextTokenDistribution:
        if top_n < 2:
            raise ValueError(f"top_n must be >= 2, got {top_n}")
        self._check_ids(context)
        body = self._request(
            "POST",
            wire.NEXT_TOKEN_PATH,
            {"context_token_ids": list(context), "top_n": top_n},
        )
        try:
            wire.validate_next_token_response(body)
        except wire.WireFormatError as exc:
            raise TransportError(f"malformed next_token response: {exc}") from exc
        entries = tuple(
            TokenEntry(e["id"], e["text"], float(e["prob"])) for e in body["entries"]
        )
        return NextTokenDistribution(
            entries=entries, truncated_mass=float(body["truncated_mass"])
        )
