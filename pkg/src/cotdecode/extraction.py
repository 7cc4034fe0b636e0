"""Locating the final answer inside a decoded path.

Three extractors: a last-number / option scan over the path text, and a
continuation-alignment extractor that greedily decodes past a trigger
phrase ("So the answer is") and matches the result back into the path.
Also filters ill-formed responses (empty, repeating, question echoes).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .backends import ModelBackend
from .decoding import (
    TERMINATED_MAX_STEPS,
    DecodedPath,
    StepRecord,
    greedy_decode,
)

__all__ = [
    "AnswerSpec",
    "AnswerSpan",
    "ExtractionMappingError",
    "canonical_number",
    "parse_number",
    "extract_answer",
    "align_continuation",
    "is_ill_formed",
    "DEFAULT_TRIGGER",
]

DEFAULT_TRIGGER = "So the answer is"

SOURCE_LAST_NUMBER = "last_number"
SOURCE_OPTION_SCAN = "option_scan"
SOURCE_CONTINUATION_ALIGNMENT = "continuation_alignment"
SOURCE_CONTINUATION_CONFIDENCE = "continuation_confidence"

# A sign counts as part of the literal only when it does not follow a word
# character / ')' (so "16-3" yields "3" while "= -9" yields "-9").
_NUMBER_RE = re.compile(r"(?:(?<![\w.,)])[-+])?\$?\d(?:[\d,]*\d)?(?:\.\d+)?")


class ExtractionMappingError(RuntimeError):
    """A matched answer could not be mapped back onto the token sequence."""


@dataclass(frozen=True)
class AnswerSpec:
    """What counts as an answer for a task: a number, one of a closed option
    set (with synonyms mapping onto canonical members), or free-form text."""

    kind: str
    options: tuple[str, ...] = ()
    synonyms: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("numeric", "option_set", "free_form"):
            raise ValueError(f"unknown answer kind {self.kind!r}")
        if self.kind == "option_set":
            if not self.options:
                raise ValueError("option_set needs at least one option")
            seen = set()
            for option in self.options:
                if not option or option != option.lower():
                    raise ValueError(f"options must be lowercase and non-empty: {option!r}")
                if option in seen:
                    raise ValueError(f"duplicate option {option!r}")
                seen.add(option)
            for alias, target in self.synonyms.items():
                if target not in seen:
                    raise ValueError(f"synonym {alias!r} maps to unknown option {target!r}")

    @classmethod
    def numeric(cls) -> "AnswerSpec":
        return cls(kind="numeric")

    @classmethod
    def option_set(
        cls, options: Sequence[str], synonyms: Mapping[str, str] | None = None
    ) -> "AnswerSpec":
        return cls(kind="option_set", options=tuple(options), synonyms=dict(synonyms or {}))

    @classmethod
    def yes_no(cls) -> "AnswerSpec":
        return cls.option_set(("yes", "no"), {"true": "yes", "false": "no"})

    @classmethod
    def even_odd(cls) -> "AnswerSpec":
        return cls.option_set(("even", "odd"))

    @classmethod
    def free_form(cls) -> "AnswerSpec":
        return cls(kind="free_form")


@dataclass(frozen=True)
class AnswerSpan:
    """Token range holding the answer, plus its canonical string form.

    For ``continuation_confidence`` spans the range indexes the continuation
    rather than the original path, and ``continuation_steps`` carries the
    step records the confidence margin is averaged over.
    """

    start: int
    end: int
    canonical: str
    source: str
    continuation_steps: tuple[StepRecord, ...] | None = None

    def __post_init__(self):
        if not self.canonical:
            raise ValueError("canonical answer must be non-empty")
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad token range [{self.start}, {self.end})")

    @property
    def token_range(self) -> tuple[int, int]:
        return (self.start, self.end)


def canonical_number(text: str) -> str | None:
    """Normalize a numeric literal: drop "$" / "%" / "," / surrounding parens
    and trailing ".", keep sign and decimal point.  None if it doesn't parse."""
    s = text.strip()
    while s.startswith("(") and s.endswith(")"):
        s = s[1:-1].strip()
    s = s.replace("$", "").replace("%", "").replace(",", "").replace(" ", "")
    s = s.rstrip(".")
    if not s:
        return None
    try:
        float(s)
    except ValueError:
        return None
    return s


def parse_number(text: str) -> float | None:
    canonical = canonical_number(text)
    return float(canonical) if canonical is not None else None


def _token_offsets(path: DecodedPath) -> list[int]:
    """Character offset of each token within ``path.text``; raises if the
    per-token texts do not concatenate to the path text."""
    joined = "".join(path.token_texts)
    if joined != path.text:
        raise ExtractionMappingError(
            f"token texts do not reproduce path text: {joined!r} vs {path.text!r}"
        )
    offsets = [0]
    for text in path.token_texts:
        offsets.append(offsets[-1] + len(text))
    return offsets


def _char_span_to_token_range(path: DecodedPath, lo: int, hi: int) -> tuple[int, int]:
    """Smallest token range whose characters cover ``[lo, hi)``."""
    offsets = _token_offsets(path)
    start = end = None
    for t in range(len(path.token_texts)):
        t_lo, t_hi = offsets[t], offsets[t + 1]
        if t_hi > lo and t_lo < hi:  # token overlaps the span
            if start is None:
                start = t
            end = t + 1
    if start is None or end is None:
        raise ExtractionMappingError(
            f"char span [{lo}, {hi}) maps to no tokens in path of length {len(path)}"
        )
    return start, end


def _option_pattern(spec: AnswerSpec) -> re.Pattern[str]:
    words = sorted(set(spec.options) | set(spec.synonyms), key=len, reverse=True)
    return re.compile(r"\b(?:%s)\b" % "|".join(re.escape(w) for w in words), re.IGNORECASE)


def _canonical_option(spec: AnswerSpec, surface: str) -> str:
    lowered = surface.lower()
    return spec.synonyms.get(lowered, lowered)


def _strip_currency(match: re.Match[str]) -> tuple[int, int, str]:
    """Span and surface of the numeric literal with a leading '$' dropped."""
    lo, hi = match.span()
    surface = match.group()
    if surface.startswith("$"):
        lo += 1
        surface = surface[1:]
    return lo, hi, surface


def extract_answer(path: DecodedPath, spec: AnswerSpec) -> AnswerSpan | None:
    """Scan the path text for its final answer.

    Numeric specs take the last numeric literal; option specs take the last
    occurrence of any option or synonym.  Final answers come last in a
    reasoning chain, hence the last-occurrence rule.  Returns None when
    nothing matches (absence is a value, not an error); free-form answers
    have no scannable pattern and always come back absent here.
    """
    if not path.text:
        return None
    if spec.kind == "numeric":
        for match in reversed(list(_NUMBER_RE.finditer(path.text))):
            lo, hi, _ = _strip_currency(match)
            canonical = canonical_number(match.group())
            if canonical is None:
                continue
            start, end = _char_span_to_token_range(path, lo, hi)
            return AnswerSpan(start, end, canonical, SOURCE_LAST_NUMBER)
        return None
    if spec.kind == "option_set":
        matches = list(_option_pattern(spec).finditer(path.text))
        if not matches:
            return None
        match = matches[-1]
        start, end = _char_span_to_token_range(path, *match.span())
        return AnswerSpan(start, end, _canonical_option(spec, match.group()), SOURCE_OPTION_SCAN)
    return None


def _continuation_surface(text: str, spec: AnswerSpec) -> str | None:
    """The answer as the continuation states it: the first literal/option,
    or the first line for free-form answers."""
    if spec.kind == "numeric":
        match = _NUMBER_RE.search(text)
        if not match:
            return None
        return _strip_currency(match)[2]
    if spec.kind == "option_set":
        match = _option_pattern(spec).search(text)
        return match.group() if match else None
    first_line = text.strip().splitlines()[0].strip() if text.strip() else ""
    return first_line.rstrip(".") or None


def _last_occurrence(haystack: str, needle: str, case_insensitive: bool) -> int:
    if case_insensitive:
        return haystack.lower().rfind(needle.lower())
    return haystack.rfind(needle)


def align_continuation(
    backend: ModelBackend,
    path: DecodedPath,
    spec: AnswerSpec,
    trigger: str = DEFAULT_TRIGGER,
    max_answer_steps: int = 16,
) -> AnswerSpan | None:
    """Decode ``path + trigger`` greedily and align the continuation back
    into the path.

    If the continuation's answer occurs in the path text, the span of its
    last occurrence is returned.  When it does not occur: numeric paths are
    given up on (absent), while option-set and free-form answers fall back
    to a span anchored at the continuation itself, whose confidence is then
    averaged over the continuation's own steps.
    """
    if max_answer_steps < 1:
        raise ValueError("max_answer_steps must be >= 1")
    context = list(path.prefix_ids) + list(path.token_ids)
    if context and context[-1] == backend.eos_id:
        context.pop()
    lead = trigger if trigger[:1].isspace() else " " + trigger
    continuation = greedy_decode(
        backend, context + backend.tokenize(lead), max_steps=max_answer_steps
    )
    surface = _continuation_surface(continuation.text, spec)
    if surface is None:
        return None

    position = _last_occurrence(path.text, surface, spec.kind == "option_set")
    if position >= 0:
        start, end = _char_span_to_token_range(path, position, position + len(surface))
        if spec.kind == "numeric":
            canonical = canonical_number(surface)
            if canonical is None:
                return None
        elif spec.kind == "option_set":
            canonical = _canonical_option(spec, surface)
        else:
            canonical = surface
        return AnswerSpan(start, end, canonical, SOURCE_CONTINUATION_ALIGNMENT)

    if spec.kind == "numeric":
        return None
    steps = tuple(s for s in continuation.steps if s.chosen_id != backend.eos_id)
    if not steps:
        return None
    canonical = _canonical_option(spec, surface) if spec.kind == "option_set" else surface
    return AnswerSpan(
        0,
        len(steps),
        canonical,
        SOURCE_CONTINUATION_CONFIDENCE,
        continuation_steps=steps,
    )


def _has_repeating_tail(ids: Sequence[int], window: int = 16, cycle: int = 4) -> bool:
    tail = list(ids[-window:])
    if len(tail) < 2 * cycle:
        return False
    return all(tail[i] == tail[i + cycle] for i in range(len(tail) - cycle))


def is_ill_formed(path: DecodedPath, question_text: str) -> tuple[bool, str | None]:
    """Flag degenerate generations before they reach scoring.

    Reasons: ``empty``; ``echoes_question`` (the output just restates the
    question); ``ends_question_mark``; ``unfinished_max_steps`` (ran out of
    budget while repeating a short token cycle).
    """
    text = path.text.strip()
    if not text:
        return True, "empty"
    if text == question_text.strip():
        return True, "echoes_question"
    if text.endswith("?"):
        return True, "ends_question_mark"
    if path.terminated == TERMINATED_MAX_STEPS and _has_repeating_tail(path.token_ids):
        return True, "unfinished_max_steps"
    return False, None
