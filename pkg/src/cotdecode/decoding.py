"""Decoding strategies over a model backend.

Implements greedy decoding, top-k branching at an arbitrary step (default:
the first step) with greedy continuation, stochastic sampling (temperature,
top-k, nucleus), and beam search.  Every emitted token carries a record of
the step's top-2 probabilities so the answer-confidence margin can be
computed downstream without re-querying the model.
"""

from __future__ import annotations

import hashlib
import math
import random
import struct
from dataclasses import dataclass
from typing import Sequence

from .backends import ModelBackend, NextTokenDistribution, TokenEntry

__all__ = [
    "DecodeStrategy",
    "StepRecord",
    "DecodedPath",
    "derive_seed",
    "greedy_decode",
    "branch_topk_decode",
    "sample_decode",
    "beam_search_decode",
]

DEFAULT_MAX_STEPS = 128

TERMINATED_EOS = "eos"
TERMINATED_MAX_STEPS = "max_steps"


def derive_seed(seed: int, index: int) -> int:
    """Stable 64-bit stream seed for path ``index``; independent of execution order."""
    digest = hashlib.sha256(struct.pack("<QQ", seed & (2**64 - 1), index & (2**64 - 1)))
    return int.from_bytes(digest.digest()[:8], "big")


@dataclass(frozen=True)
class DecodeStrategy:
    """A decoding rule: greedy, temperature/top-k/nucleus sampling, or beam."""

    kind: str
    temperature: float | None = None
    k: int | None = None
    p: float | None = None
    b: int | None = None
    seed: int = 0

    _KINDS = ("greedy", "temperature", "top_k", "nucleus", "beam")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "temperature" and not (self.temperature and self.temperature > 0):
            raise ValueError("temperature must be > 0")
        if self.kind == "top_k" and not (self.k and self.k >= 1):
            raise ValueError("top-k sampling needs k >= 1")
        if self.kind == "nucleus" and not (self.p and 0 < self.p <= 1):
            raise ValueError("nucleus sampling needs 0 < p <= 1")
        if self.kind == "beam" and not (self.b and self.b >= 1):
            raise ValueError("beam search needs b >= 1")

    @property
    def is_stochastic(self) -> bool:
        return self.kind in ("temperature", "top_k", "nucleus")

    @classmethod
    def greedy(cls) -> "DecodeStrategy":
        return cls(kind="greedy")

    @classmethod
    def temperature_sampling(cls, t: float, seed: int = 0) -> "DecodeStrategy":
        return cls(kind="temperature", temperature=t, seed=seed)

    @classmethod
    def top_k_sampling(cls, k: int, seed: int = 0) -> "DecodeStrategy":
        return cls(kind="top_k", k=k, seed=seed)

    @classmethod
    def nucleus_sampling(cls, p: float, seed: int = 0) -> "DecodeStrategy":
        return cls(kind="nucleus", p=p, seed=seed)

    @classmethod
    def beam_search(cls, b: int) -> "DecodeStrategy":
        return cls(kind="beam", b=b)


@dataclass(frozen=True)
class StepRecord:
    """What happened at one decoding step: the emitted token and the step's
    top-2 candidates (``top2`` is absent only for a one-token vocabulary)."""

    position: int
    chosen_id: int
    top1: TokenEntry
    top2: TokenEntry | None

    @property
    def margin(self) -> float:
        return self.top1.prob - (self.top2.prob if self.top2 is not None else 0.0)


@dataclass(frozen=True)
class DecodedPath:
    """One complete generation.

    ``branch_index`` is which alternative token was taken at
    ``branch_position`` (0 = greedy, i.e. the top-1 token); every other step
    continues greedily.  ``prefix_ids`` and ``token_texts`` make the path
    self-contained for continuation decoding, answer-span mapping, and
    offline trace replay.
    """

    branch_index: int
    branch_position: int
    token_ids: tuple[int, ...]
    token_texts: tuple[str, ...]
    text: str
    steps: tuple[StepRecord, ...]
    terminated: str
    cumulative_logprob: float
    prefix_ids: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.token_ids) == len(self.steps) == len(self.token_texts)):
            raise ValueError("token_ids, token_texts and steps must have equal length")
        if self.terminated not in (TERMINATED_EOS, TERMINATED_MAX_STEPS):
            raise ValueError(f"unknown termination reason {self.terminated!r}")

    def __len__(self) -> int:
        return len(self.token_ids)


def _log(p: float) -> float:
    return math.log(p) if p > 0.0 else float("-inf")


class _PathBuilder:
    """Mutable accumulator for one path; all paths share this code so the
    floating-point accumulation order is identical across strategies."""

    __slots__ = ("ctx", "token_ids", "token_texts", "steps", "logprob", "position")

    def __init__(self, prefix: Sequence[int]):
        self.ctx = list(prefix)
        self.token_ids: list[int] = []
        self.token_texts: list[str] = []
        self.steps: list[StepRecord] = []
        self.logprob = 0.0
        self.position = 0

    def clone(self) -> "_PathBuilder":
        other = _PathBuilder(())
        other.ctx = list(self.ctx)
        other.token_ids = list(self.token_ids)
        other.token_texts = list(self.token_texts)
        other.steps = list(self.steps)
        other.logprob = self.logprob
        other.position = self.position
        return other

    def emit(self, dist: NextTokenDistribution, chosen: TokenEntry) -> None:
        self.steps.append(StepRecord(self.position, chosen.id, dist.top1, dist.top2))
        self.token_ids.append(chosen.id)
        self.token_texts.append(chosen.text)
        self.ctx.append(chosen.id)
        self.logprob += _log(chosen.prob)
        self.position += 1

    def finish(
        self, prefix: Sequence[int], terminated: str, branch_index: int, branch_position: int
    ) -> DecodedPath:
        return DecodedPath(
            branch_index=branch_index,
            branch_position=branch_position,
            token_ids=tuple(self.token_ids),
            token_texts=tuple(self.token_texts),
            text="".join(self.token_texts),
            steps=tuple(self.steps),
            terminated=terminated,
            cumulative_logprob=self.logprob,
            prefix_ids=tuple(prefix),
        )


def _check_preconditions(prefix: Sequence[int], max_steps: int) -> None:
    if not prefix:
        raise ValueError("prefix must be non-empty")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")


def _greedy_continue(
    backend: ModelBackend, builder: _PathBuilder, max_steps: int, top_n: int
) -> str:
    """Greedily extend ``builder`` until end-of-sequence or ``max_steps``."""
    while builder.position < max_steps:
        dist = backend.next_token_distribution(builder.ctx, top_n)
        chosen = dist.top1
        builder.emit(dist, chosen)
        if chosen.id == backend.eos_id:
            return TERMINATED_EOS
    return TERMINATED_MAX_STEPS


def greedy_decode(
    backend: ModelBackend,
    prefix: Sequence[int],
    max_steps: int = DEFAULT_MAX_STEPS,
    *,
    top_n: int = 2,
) -> DecodedPath:
    """Emit the top-1 token at every step until end-of-sequence or ``max_steps``."""
    _check_preconditions(prefix, max_steps)
    builder = _PathBuilder(prefix)
    terminated = _greedy_continue(backend, builder, max_steps, max(top_n, 2))
    return builder.finish(prefix, terminated, branch_index=0, branch_position=0)


def branch_topk_decode(
    backend: ModelBackend,
    prefix: Sequence[int],
    k: int,
    branch_position: int = 0,
    max_steps: int = DEFAULT_MAX_STEPS,
    *,
    top_n: int = 2,
) -> list[DecodedPath]:
    """Branch into the top-k tokens at ``branch_position``, then continue greedily.

    Path i takes the (i+1)-th most probable token at the branch step; path 0
    is therefore the greedy path when ``branch_position`` is 0.  All paths
    share the greedy prefix before the branch step.  Returns
    ``min(k, reachable vocabulary)`` paths in branch order; if the greedy
    prefix ends before the branch step is reached, only that single path
    exists and is returned alone.
    """
    _check_preconditions(prefix, max_steps)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= branch_position < max_steps:
        raise ValueError("branch_position must satisfy 0 <= branch_position < max_steps")
    top_n = max(top_n, 2)

    shared = _PathBuilder(prefix)
    while shared.position < branch_position:
        dist = backend.next_token_distribution(shared.ctx, top_n)
        shared.emit(dist, dist.top1)
        if dist.top1.id == backend.eos_id:
            return [shared.finish(prefix, TERMINATED_EOS, branch_index=0, branch_position=0)]

    branch_dist = backend.next_token_distribution(shared.ctx, max(top_n, k))
    paths = []
    for i, chosen in enumerate(branch_dist.entries[:k]):
        builder = shared.clone()
        builder.emit(branch_dist, chosen)
        if chosen.id == backend.eos_id:
            terminated = TERMINATED_EOS
        else:
            terminated = _greedy_continue(backend, builder, max_steps, top_n)
        paths.append(builder.finish(prefix, terminated, i, branch_position))
    return paths


def _sampling_weights(dist: NextTokenDistribution, strategy: DecodeStrategy) -> list[float]:
    """Normalized sampling weights over ``dist.entries`` for a stochastic strategy."""
    probs = [e.prob for e in dist.entries]
    if strategy.kind == "temperature":
        # Work in log space so the T->0 limit degrades to argmax instead of 0/0.
        logits = [_log(p) / strategy.temperature for p in probs]
        peak = max(logits)
        weights = [math.exp(x - peak) if x > float("-inf") else 0.0 for x in logits]
    elif strategy.kind == "top_k":
        keep = min(strategy.k, len(probs))
        weights = probs[:keep] + [0.0] * (len(probs) - keep)
    else:  # nucleus
        total = 0.0
        cut = 0
        for prob in probs:
            total += prob
            cut += 1
            if total >= strategy.p - 1e-12:
                break
        if total < strategy.p - 1e-12 and dist.truncated_mass > 1e-12:
            raise ValueError(
                f"nucleus p={strategy.p} not reachable with the returned entries "
                f"(mass {total}); request a larger top_n"
            )
        weights = probs[:cut] + [0.0] * (len(probs) - cut)
    total = sum(weights)
    if total <= 0.0:
        raise ValueError("sampling weights sum to zero")
    return [w / total for w in weights]


def sample_decode(
    backend: ModelBackend,
    prefix: Sequence[int],
    strategy: DecodeStrategy,
    max_steps: int = DEFAULT_MAX_STEPS,
    *,
    top_n: int | None = None,
    sample_index: int = 0,
) -> DecodedPath:
    """Sample one path under a stochastic strategy.

    Deterministic given (strategy.seed, sample_index, prefix, backend): the
    RNG stream is derived from the seed and path index, so execution order
    and thread schedule cannot change results.  ``top_n`` defaults to the
    full vocabulary, which is exact for toy models; remote callers should
    pass the width they can afford.
    """
    _check_preconditions(prefix, max_steps)
    if not strategy.is_stochastic:
        raise ValueError(f"sample_decode needs a stochastic strategy, got {strategy.kind!r}")
    width = max(2, top_n if top_n is not None else backend.vocab_size)
    rng = random.Random(derive_seed(strategy.seed, sample_index))

    builder = _PathBuilder(prefix)
    terminated = TERMINATED_MAX_STEPS
    while builder.position < max_steps:
        dist = backend.next_token_distribution(builder.ctx, width)
        weights = _sampling_weights(dist, strategy)
        roll = rng.random()
        cumulative = 0.0
        pick = len(weights) - 1
        for n, w in enumerate(weights):
            cumulative += w
            if roll < cumulative:
                pick = n
                break
        chosen = dist.entries[pick]
        builder.emit(dist, chosen)
        if chosen.id == backend.eos_id:
            terminated = TERMINATED_EOS
            break
    return builder.finish(prefix, terminated, branch_index=sample_index, branch_position=0)


def beam_search_decode(
    backend: ModelBackend,
    prefix: Sequence[int],
    b: int,
    max_steps: int = DEFAULT_MAX_STEPS,
    *,
    top_n: int | None = None,
) -> list[DecodedPath]:
    """Beam search on cumulative log-probability, without length normalization.

    Beams that emit end-of-sequence are retired and compete with live beams
    at final selection.  Returns up to ``b`` paths sorted by cumulative
    log-probability descending; ``branch_index`` is the final rank.
    """
    _check_preconditions(prefix, max_steps)
    if b < 1:
        raise ValueError("b must be >= 1")
    width = max(2, b, top_n or 0)

    live: list[_PathBuilder] = [_PathBuilder(prefix)]
    finished: list[_PathBuilder] = []
    for _ in range(max_steps):
        if not live:
            break
        # (-logprob, parent order, token id) keeps expansion deterministic
        # and makes b=1 reduce exactly to greedy decoding.
        candidates: list[tuple[float, int, int, NextTokenDistribution, TokenEntry]] = []
        for parent_index, beam in enumerate(live):
            dist = backend.next_token_distribution(beam.ctx, width)
            for entry in dist.entries[:b]:
                score = beam.logprob + _log(entry.prob)
                if score == float("-inf"):
                    continue  # probability-zero continuation, not a real hypothesis
                candidates.append((-score, parent_index, entry.id, dist, entry))
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        next_live: list[_PathBuilder] = []
        for _, parent_index, _, dist, entry in candidates[:b]:
            child = live[parent_index].clone()
            child.emit(dist, entry)
            if entry.id == backend.eos_id:
                finished.append(child)
            else:
                next_live.append(child)
        live = next_live

    pool = [(builder, TERMINATED_EOS) for builder in finished]
    pool += [(builder, TERMINATED_MAX_STEPS) for builder in live]
    pool.sort(key=lambda item: (-item[0].logprob, tuple(item[0].token_ids)))
    return [
        builder.finish(prefix, terminated, branch_index=rank, branch_position=0)
        for rank, (builder, terminated) in enumerate(pool[:b])
    ]
