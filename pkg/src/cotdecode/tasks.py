"""Task construction: prompt formats, JSONL ingestion, synthetic reasoning
task generators with programmatic ground truth, and grading."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .extraction import AnswerSpec, canonical_number, parse_number

__all__ = [
    "TaskInstance",
    "PromptTemplate",
    "DatasetError",
    "build_prompt",
    "gen_coin_flip",
    "gen_web_of_lies",
    "gen_multistep_arithmetic",
    "gen_year_parity",
    "evaluate_arithmetic",
    "load_jsonl_dataset",
    "grade_prediction",
    "bundled_celebrities",
    "bundled_names",
    "DEFAULT_COT_TRIGGER",
]

DEFAULT_COT_TRIGGER = "Let's think step by step."

NUMERIC_GRADE_TOLERANCE = 1e-6


class DatasetError(ValueError):
    """A dataset file could not be parsed."""


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question: str
    ground_truth: str
    spec: AnswerSpec
    meta: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class PromptTemplate:
    """How a question is rendered into the model prefix.

    ``standard_qa`` is "Q: {question}\\nA:"; ``raw`` passes the question
    through unchanged (used for arithmetic where a Q/A wrapper is unnatural);
    ``zero_shot_cot`` appends a reasoning trigger after "A:"; ``few_shot``
    prepends worked exemplars of (question, rationale, answer).
    """

    kind: str = "standard_qa"
    exemplars: tuple[tuple[str, str, str], ...] = ()
    cot_trigger: str = DEFAULT_COT_TRIGGER

    def __post_init__(self):
        if self.kind not in ("standard_qa", "raw", "zero_shot_cot", "few_shot"):
            raise ValueError(f"unknown template kind {self.kind!r}")


def build_prompt(instance: TaskInstance, template: PromptTemplate) -> str:
    if template.kind == "raw":
        return instance.question
    if template.kind == "standard_qa":
        return f"Q: {instance.question}\nA:"
    if template.kind == "zero_shot_cot":
        return f"Q: {instance.question}\nA: {template.cot_trigger}"
    if not template.exemplars:
        raise ValueError("few_shot template needs at least one exemplar")
    blocks = [
        f"Q: {question}\nA: {rationale} The answer is {answer}."
        for question, rationale, answer in template.exemplars
    ]
    blocks.append(f"Q: {instance.question}\nA:")
    return "\n\n".join(blocks)


def _data_lines(filename: str) -> list[str]:
    text = resources.files("cotdecode").joinpath(f"data/{filename}").read_text("utf-8")
    return [line for line in text.splitlines() if line.strip()]


def bundled_names() -> list[str]:
    """Fixed actor-name pool so generated instances are reproducible."""
    return _data_lines("first_names.txt")


def bundled_celebrities() -> list[tuple[str, int]]:
    """Static (name, birth year) table for the year-parity task."""
    people = []
    for line in _data_lines("celebrities.txt"):
        name, year = line.rsplit("\t", 1)
        people.append((name, int(year)))
    return people


def gen_coin_flip(rounds: int, count: int, seed: int) -> list[TaskInstance]:
    """State-tracking task: a heads-up coin, ``rounds`` actors who each
    either flip it or leave it, and the question of whether it is still
    heads up.  Truth is "yes" iff the number of flips is even."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = random.Random(seed)
    pool = bundled_names()
    spec = AnswerSpec.yes_no()
    instances = []
    for n in range(count):
        names = rng.sample(pool, rounds)
        flips = [rng.random() < 0.5 for _ in range(rounds)]
        sentences = ["A coin is heads up."]
        for name, flips_it in zip(names, flips):
            verb = "flips" if flips_it else "does not flip"
            sentences.append(f"{name} {verb} the coin.")
        sentences.append("Is the coin still heads up?")
        truth = "yes" if sum(flips) % 2 == 0 else "no"
        instances.append(
            TaskInstance(
                id=f"coin_flip_r{rounds}_{n:04d}",
                question=" ".join(sentences),
                ground_truth=truth,
                spec=spec,
                meta={"family": "coin_flip", "rounds": rounds, "flips": sum(flips)},
            )
        )
    return instances


def gen_web_of_lies(statements: int, count: int, seed: int) -> list[TaskInstance]:
    """Chain-of-testimony task: person 1 tells the truth or lies, each later
    person asserts whether the previous one tells the truth, and the
    question asks about the last person.  Truth propagates down the chain."""
    if statements < 2:
        raise ValueError("statements must be >= 2")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = random.Random(seed)
    pool = bundled_names()
    spec = AnswerSpec.yes_no()
    instances = []
    for n in range(count):
        names = rng.sample(pool, statements)
        claims = [rng.random() < 0.5 for _ in range(statements)]
        truthful = claims[0]
        sentences = [f"{names[0]} {'tells the truth' if claims[0] else 'lies'}."]
        for i in range(1, statements):
            said = "tells the truth" if claims[i] else "lies"
            sentences.append(f"{names[i]} says {names[i - 1]} {said}.")
            truthful = claims[i] == truthful
        sentences.append(f"Does {names[-1]} tell the truth?")
        instances.append(
            TaskInstance(
                id=f"web_of_lies_s{statements}_{n:04d}",
                question=" ".join(sentences),
                ground_truth="yes" if truthful else "no",
                spec=spec,
                meta={"family": "web_of_lies", "statements": statements},
            )
        )
    return instances


_ARITH_TOKEN_RE = re.compile(r"\d+|[()+*-]")


def _arith_tokens(text: str) -> list[str]:
    tokens = _ARITH_TOKEN_RE.findall(text)
    if "".join(tokens) != re.sub(r"\s+", "", text):
        raise ValueError(f"not an arithmetic expression: {text!r}")
    return tokens


def evaluate_arithmetic(text: str) -> int:
    """Exact integer value of a {+, -, *} expression with parentheses and
    unary minus, under standard operator precedence.  A trailing '=' (the
    rendered question form) is ignored."""
    tokens = _arith_tokens(text.strip().rstrip("=").strip())
    pos = 0

    def peek() -> str | None:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        token = tokens[pos]
        pos += 1
        return token

    def factor() -> int:
        token = peek()
        if token is None:
            raise ValueError("unexpected end of expression")
        if token == "-":
            take()
            return -factor()
        if token == "+":
            take()
            return factor()
        if token == "(":
            take()
            value = expr()
            if peek() != ")":
                raise ValueError("missing closing parenthesis")
            take()
            return value
        if token.isdigit():
            return int(take())
        raise ValueError(f"unexpected token {token!r}")

    def term() -> int:
        value = factor()
        while peek() == "*":
            take()
            value *= factor()
        return value

    def expr() -> int:
        value = term()
        while peek() in ("+", "-"):
            if take() == "+":
                value += term()
            else:
                value -= term()
        return value

    result = expr()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens at {pos}: {tokens[pos:]}")
    return result


def _render_expression(rng: random.Random, depth: int, length: int) -> str:
    def operand() -> str:
        if depth == 0:
            return str(rng.randint(-9, 9))
        return "(" + _render_expression(rng, depth - 1, length) + ")"

    parts = [operand()]
    for _ in range(length - 1):
        parts.append(rng.choice("+-*"))
        parts.append(operand())
    return " ".join(parts)


def gen_multistep_arithmetic(depth: int, length: int, count: int, seed: int) -> list[TaskInstance]:
    """Expressions of ``length`` operands in [-9, 9] joined by {+, -, *},
    nested ``depth`` levels deep (each sub-expression again of ``length``
    operands), rendered as "(expr) =" with exact integer ground truth."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if length < 2:
        raise ValueError("length must be >= 2")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = random.Random(seed)
    spec = AnswerSpec.numeric()
    instances = []
    for n in range(count):
        body = _render_expression(rng, depth, length)
        question = f"({body}) ="
        instances.append(
            TaskInstance(
                id=f"arith_d{depth}_l{length}_{n:04d}",
                question=question,
                ground_truth=str(evaluate_arithmetic(question)),
                spec=spec,
                meta={"family": "arith", "depth": depth, "length": length},
            )
        )
    return instances


def gen_year_parity(
    people: Iterable[tuple[str, int]] | None = None, limit: int | None = None
) -> list[TaskInstance]:
    """"Was {name} born in an even or odd year?" over a (name, year) table;
    defaults to the bundled celebrity list."""
    table = list(people) if people is not None else bundled_celebrities()
    if limit is not None:
        table = table[:limit]
    spec = AnswerSpec.even_odd()
    instances = []
    for n, (name, year) in enumerate(table):
        if year <= 0:
            raise ValueError(f"birth year must be positive, got {year} for {name!r}")
        instances.append(
            TaskInstance(
                id=f"year_parity_{n:04d}",
                question=f"Was {name} born in an even or odd year?",
                ground_truth="even" if year % 2 == 0 else "odd",
                spec=spec,
                meta={"family": "year_parity", "name": name, "year": year},
            )
        )
    return instances


def _canonical_ground_truth(raw: str, spec: AnswerSpec, where: str) -> str:
    if spec.kind == "numeric":
        # GSM8K-style files put the final answer after a "#### " delimiter.
        text = raw.split("#### ")[-1] if "#### " in raw else raw
        canonical = canonical_number(text)
        if canonical is None:
            raise DatasetError(f"{where}: answer {raw!r} is not numeric")
        return canonical
    if spec.kind == "option_set":
        lowered = raw.strip().lower()
        canonical = spec.synonyms.get(lowered, lowered)
        if canonical not in spec.options:
            raise DatasetError(f"{where}: answer {raw!r} is not one of {spec.options}")
        return canonical
    return raw.strip()


def load_jsonl_dataset(path: str | Path, spec: AnswerSpec) -> list[TaskInstance]:
    """One JSON object per line with "question" and "answer" fields."""
    path = Path(path)
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from exc
            for fieldname in ("question", "answer"):
                if fieldname not in record:
                    raise DatasetError(f"{where}: missing field {fieldname!r}")
            truth = _canonical_ground_truth(str(record["answer"]), spec, where)
            instances.append(
                TaskInstance(
                    id=str(record.get("id", f"{path.stem}-{lineno}")),
                    question=str(record["question"]),
                    ground_truth=truth,
                    spec=spec,
                    meta={"family": "jsonl", "path": str(path)},
                )
            )
    return instances


def grade_prediction(predicted: str | None, instance: TaskInstance) -> bool:
    """Numeric answers compare by value within 1e-6, options by canonical
    string; a missing prediction is wrong."""
    if predicted is None:
        return False
    if instance.spec.kind == "numeric":
        got = parse_number(predicted)
        want = parse_number(instance.ground_truth)
        if got is None or want is None:
            return False
        return abs(got - want) <= NUMERIC_GRADE_TOLERANCE
    return predicted.strip().lower() == instance.ground_truth.strip().lower()
