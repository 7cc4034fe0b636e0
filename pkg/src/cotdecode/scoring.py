"""Answer-confidence scoring and path selection.

The confidence of a path's answer is the mean probability margin between
the step's top-1 and top-2 candidates, taken over the answer tokens.  On
top of that: max-confidence selection, confidence-weighted answer
aggregation, and the majority-vote / log-probability ranking baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .backends import ModelBackend
from .decoding import DecodedPath
from .extraction import (
    SOURCE_CONTINUATION_CONFIDENCE,
    AnswerSpan,
    AnswerSpec,
    align_continuation,
    extract_answer,
    is_ill_formed,
    parse_number,
)

__all__ = [
    "ScoredPath",
    "AnswerGroup",
    "AggregateResult",
    "answer_confidence",
    "score_paths",
    "select_max_confidence",
    "aggregate_weighted",
    "majority_vote",
    "rank_by_logprob",
    "LastAnswerExtractor",
    "ContinuationExtractor",
]

NUMERIC_GROUP_TOLERANCE = 1e-6


def answer_confidence(path: DecodedPath, span: AnswerSpan, *, measure: str = "margin") -> float:
    """Mean top-1/top-2 probability margin over the answer tokens.

    For ``continuation_confidence`` spans the mean is taken over the
    continuation's own step records instead of the path's.  ``measure``
    accepts the experimental "top1" variant (mean top-1 probability alone),
    which ranks slightly worse and is excluded from acceptance checks.
    """
    if measure not in ("margin", "top1"):
        raise ValueError(f"unknown confidence measure {measure!r}")
    if span.source == SOURCE_CONTINUATION_CONFIDENCE:
        if not span.continuation_steps:
            raise ValueError("continuation_confidence span carries no continuation steps")
        steps = span.continuation_steps
    else:
        if span.end > len(path.steps):
            raise ValueError(
                f"span [{span.start}, {span.end}) exceeds path length {len(path.steps)}"
            )
        steps = path.steps[span.start : span.end]
    if measure == "top1":
        total = sum(s.top1.prob for s in steps)
    else:
        total = sum(s.margin for s in steps)
    delta = total / len(steps)
    if not 0.0 <= delta <= 1.0:
        raise AssertionError(f"confidence {delta} escaped [0, 1]")
    return delta


@dataclass(frozen=True)
class ScoredPath:
    """A decoded path with its extracted answer and confidence.

    ``delta`` is present iff ``span`` is.  Filtered (ill-formed) paths are
    retained for reporting but never contribute to selection or aggregation.
    """

    path: DecodedPath
    span: AnswerSpan | None
    delta: float | None
    logprob: float
    normalized_logprob: float
    filtered: bool = False
    filter_reason: str | None = None
    extraction_error: str | None = None

    @property
    def eligible(self) -> bool:
        return not self.filtered and self.span is not None and self.delta is not None

    @property
    def branch_index(self) -> int:
        return self.path.branch_index

    @property
    def canonical(self) -> str | None:
        return self.span.canonical if self.span is not None else None


class LastAnswerExtractor:
    """Extraction by scanning the path text (last number / last option)."""

    name = "last_answer"

    def __init__(self, spec: AnswerSpec):
        self.spec = spec

    def __call__(self, path: DecodedPath) -> AnswerSpan | None:
        return extract_answer(path, self.spec)


class ContinuationExtractor:
    """Extraction by aligning the greedy continuation of a trigger phrase."""

    name = "continuation"

    def __init__(
        self,
        backend: ModelBackend,
        spec: AnswerSpec,
        trigger: str | None = None,
        max_answer_steps: int = 16,
    ):
        self.backend = backend
        self.spec = spec
        self.trigger = trigger
        self.max_answer_steps = max_answer_steps

    def __call__(self, path: DecodedPath) -> AnswerSpan | None:
        kwargs = {"max_answer_steps": self.max_answer_steps}
        if self.trigger is not None:
            kwargs["trigger"] = self.trigger
        return align_continuation(self.backend, path, self.spec, **kwargs)


def score_paths(
    paths: Sequence[DecodedPath],
    spec: AnswerSpec,
    extractor: Callable[[DecodedPath], AnswerSpan | None],
    *,
    question_text: str = "",
) -> list[ScoredPath]:
    """Filter, extract, and score every path.

    Ill-formed paths are kept with a ``filtered`` flag; extractor failures
    are recorded per path without aborting the batch.
    """
    scored: list[ScoredPath] = []
    for path in paths:
        logprob = path.cumulative_logprob
        normalized = logprob / len(path) if len(path) else 0.0
        bad, reason = is_ill_formed(path, question_text)
        if bad:
            scored.append(
                ScoredPath(path, None, None, logprob, normalized, filtered=True, filter_reason=reason)
            )
            continue
        span = None
        error = None
        try:
            span = extractor(path)
        except Exception as exc:  # noqa: BLE001 - per-path isolation is the contract
            error = f"{type(exc).__name__}: {exc}"
        delta = answer_confidence(path, span) if span is not None else None
        scored.append(
            ScoredPath(path, span, delta, logprob, normalized, extraction_error=error)
        )
    return scored


def _eligible(scored: Sequence[ScoredPath]) -> list[ScoredPath]:
    return [sp for sp in scored if sp.eligible]


def select_max_confidence(scored: Sequence[ScoredPath]) -> ScoredPath | None:
    """The eligible path with the highest confidence; ties go to the lowest
    branch index (the model's own ranking).  None when nothing is eligible."""
    candidates = _eligible(scored)
    if not candidates:
        return None
    return min(candidates, key=lambda sp: (-sp.delta, sp.branch_index))


@dataclass(frozen=True)
class AnswerGroup:
    canonical: str
    path_indices: tuple[int, ...]
    total_delta: float
    count: int
    min_branch_index: int
    best_branch_index: int


def _group_by_answer(scored: Sequence[ScoredPath]) -> list[AnswerGroup]:
    """Group eligible paths by answer; numeric answers group by value
    equality within 1e-6 ("60" and "60.00" are one answer)."""
    order = sorted(
        (i for i, sp in enumerate(scored) if sp.eligible),
        key=lambda i: scored[i].branch_index,
    )
    buckets: list[dict] = []
    for index in order:
        sp = scored[index]
        value = parse_number(sp.canonical)
        home = None
        for bucket in buckets:
            if value is not None and bucket["value"] is not None:
                if abs(value - bucket["value"]) <= NUMERIC_GROUP_TOLERANCE:
                    home = bucket
                    break
            elif value is None and bucket["value"] is None:
                if bucket["canonical"] == sp.canonical:
                    home = bucket
                    break
        if home is None:
            home = {"canonical": sp.canonical, "value": value, "members": []}
            buckets.append(home)
        home["members"].append(index)
    groups = []
    for bucket in buckets:
        members = bucket["members"]
        best = max(members, key=lambda i: (scored[i].delta, -scored[i].branch_index))
        groups.append(
            AnswerGroup(
                canonical=bucket["canonical"],
                path_indices=tuple(members),
                total_delta=sum(scored[i].delta for i in members),
                count=len(members),
                min_branch_index=min(scored[i].branch_index for i in members),
                best_branch_index=scored[best].branch_index,
            )
        )
    return groups


@dataclass(frozen=True)
class AggregateResult:
    """Winner of confidence-weighted aggregation: the answer maximizing the
    summed confidence over its supporting paths."""

    winner: str
    score: float
    support: Mapping[str, AnswerGroup]


def aggregate_weighted(scored: Sequence[ScoredPath]) -> AggregateResult | None:
    """Sum each answer's confidence over its supporting paths and take the
    maximizing answer; ties go to the answer whose best supporter has the
    lower branch index."""
    groups = _group_by_answer(scored)
    if not groups:
        return None
    winner = min(groups, key=lambda g: (-g.total_delta, g.best_branch_index))
    return AggregateResult(
        winner=winner.canonical,
        score=winner.total_delta,
        support={g.canonical: g for g in groups},
    )


def majority_vote(scored: Sequence[ScoredPath]) -> str | None:
    """Most frequent answer (self-consistency baseline); ties go to the
    answer whose earliest supporting path has the lower branch/sample index."""
    groups = _group_by_answer(scored)
    if not groups:
        return None
    winner = min(groups, key=lambda g: (-g.count, g.min_branch_index))
    return winner.canonical


def rank_by_logprob(scored: Sequence[ScoredPath], normalized: bool = False) -> ScoredPath | None:
    """Baseline ranking by (optionally length-normalized) log-probability."""
    candidates = _eligible(scored)
    if not candidates:
        return None
    if normalized:
        return min(candidates, key=lambda sp: (-sp.normalized_logprob, sp.branch_index))
    return min(candidates, key=lambda sp: (-sp.logprob, sp.branch_index))
