"""Experiment orchestration: backend x task x decoding method x selector.

Runs each task instance through prompt building, decoding, filtering,
extraction, scoring, selection and grading; emits machine-readable reports
plus per-path traces rich enough to recompute every confidence value
offline.  Table-backend runs are bit-deterministic for a given seed,
independent of worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import re
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backends import ModelBackend, RemoteBackend, TransportError, build_table_model, load_table_spec
from .decoding import (
    DecodedPath,
    DecodeStrategy,
    StepRecord,
    beam_search_decode,
    branch_topk_decode,
    derive_seed,
    greedy_decode,
    sample_decode,
)
from .extraction import AnswerSpan, AnswerSpec, extract_answer
from .scoring import (
    ContinuationExtractor,
    LastAnswerExtractor,
    ScoredPath,
    aggregate_weighted,
    majority_vote,
    rank_by_logprob,
    score_paths,
    select_max_confidence,
)
from .tasks import (
    PromptTemplate,
    TaskInstance,
    build_prompt,
    gen_coin_flip,
    gen_multistep_arithmetic,
    gen_web_of_lies,
    gen_year_parity,
    grade_prediction,
    load_jsonl_dataset,
)

__all__ = [
    "ExperimentConfig",
    "ReportRow",
    "Report",
    "load_config",
    "parse_config_text",
    "run_experiment",
    "emit_report",
    "ensure_writable",
    "replay_run",
    "format_trace",
    "REMOTE_URL_ENV",
]

REMOTE_URL_ENV = "COTDECODE_REMOTE_URL"

METHODS = ("greedy", "cot_decoding", "sample", "beam", "rank_baseline")
TASK_FAMILIES = ("coin_flip", "web_of_lies", "arith", "year_parity", "jsonl")
ANSWER_KINDS = ("numeric", "yes_no", "even_odd", "free_form")


@dataclass
class ExperimentConfig:
    """Flat key-value experiment description; every field is a config-file
    key and a CLI override."""

    backend: str = "table"            # table | remote
    table_spec: str = ""
    remote_url: str = ""

    task: str = "year_parity"         # coin_flip | web_of_lies | arith | year_parity | jsonl
    jsonl_path: str = ""
    answer_kind: str = "numeric"      # for jsonl tasks
    rounds: int = 2
    statements: int = 3
    depth: int = 0
    length: int = 3
    count: int = 100
    limit: int = 0                    # 0 = all instances

    template: str = "standard_qa"     # standard_qa | raw | zero_shot_cot
    cot_trigger: str = "Let's think step by step."

    method: str = "cot_decoding"
    k: int = 10
    branch_position: int = 0
    selector: str = "max_path"        # max_path | aggregate | majority
    strategy: str = "temperature"     # temperature | top_k | nucleus
    temperature: float = 0.7
    sample_k: int = 10
    top_p: float = 0.9
    n_paths: int = 10
    b: int = 10
    normalized: bool = False

    extractor: str = "last_answer"    # last_answer | continuation
    trigger: str = "So the answer is"
    max_answer_steps: int = 16

    max_steps: int = 128
    top_n: int = 0                    # 0 = auto: max(2, k)
    seed: int = 0
    workers: int = 1
    retries: int = 3
    output_dir: str = "runs/out"
    rows_format: str = "csv"          # csv | json
    year_parity_rederive: bool = False

    def resolved_top_n(self) -> int:
        return self.top_n if self.top_n >= 2 else max(2, self.k)

    def validate(self) -> None:
        if self.backend not in ("table", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "table" and not self.table_spec:
            raise ValueError("table backend needs table_spec")
        if self.backend == "remote" and not (self.remote_url or os.environ.get(REMOTE_URL_ENV)):
            raise ValueError(f"remote backend needs remote_url or ${REMOTE_URL_ENV}")
        if self.task not in TASK_FAMILIES:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "jsonl" and not self.jsonl_path:
            raise ValueError("jsonl task needs jsonl_path")
        if self.answer_kind not in ANSWER_KINDS:
            raise ValueError(f"unknown answer_kind {self.answer_kind!r}")
        if self.template not in ("standard_qa", "raw", "zero_shot_cot"):
            raise ValueError(f"unknown template {self.template!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "cot_decoding" and self.selector not in ("max_path", "aggregate"):
            raise ValueError("cot_decoding selector must be max_path or aggregate")
        if self.method == "sample" and self.selector not in ("majority", "aggregate"):
            raise ValueError("sample selector must be majority or aggregate")
        if self.strategy not in ("temperature", "top_k", "nucleus"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.extractor not in ("last_answer", "continuation"):
            raise ValueError(f"unknown extractor {self.extractor!r}")
        if self.rows_format not in ("csv", "json"):
            raise ValueError(f"unknown rows_format {self.rows_format!r}")
        if self.k < 1 or self.b < 1 or self.n_paths < 1:
            raise ValueError("k, b and n_paths must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0 <= self.branch_position < self.max_steps:
            raise ValueError("branch_position must satisfy 0 <= branch_position < max_steps")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.resolved_top_n() < 2:
            raise ValueError("top_n must be >= 2")
        DecodeStrategy(
            kind=self.strategy, temperature=self.temperature, k=self.sample_k, p=self.top_p
        )


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(value: str, target_type: type) -> object:
    if target_type is bool:
        lowered = value.strip().lower()
        if lowered not in _BOOL_VALUES:
            raise ValueError(f"expected a boolean, got {value!r}")
        return _BOOL_VALUES[lowered]
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(ExperimentConfig)}


def apply_overrides(config: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    types = _field_types()
    for key, value in overrides.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        setattr(config, key, _coerce(value, types[key]))
    return config


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat "key = value" config format (UTF-8, # comments)."""
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        overrides[key.strip()] = value.strip()
    return apply_overrides(ExperimentConfig(), overrides)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text("utf-8"))


@dataclass(frozen=True)
class ReportRow:
    instance_id: str
    predicted: str | None
    correct: bool
    selector_detail: str
    paths_after_filter: int
    wall_time_ms: float


@dataclass
class Report:
    config: dict
    rows: list[ReportRow]
    traces: list[dict]
    accuracy: float
    metadata: dict
    incomplete: bool = False
    error: str = ""


def _answer_spec_for(config: ExperimentConfig) -> AnswerSpec:
    if config.task in ("coin_flip", "web_of_lies"):
        return AnswerSpec.yes_no()
    if config.task == "year_parity":
        return AnswerSpec.even_odd()
    if config.task == "arith":
        return AnswerSpec.numeric()
    return {
        "numeric": AnswerSpec.numeric(),
        "yes_no": AnswerSpec.yes_no(),
        "even_odd": AnswerSpec.even_odd(),
        "free_form": AnswerSpec.free_form(),
    }[config.answer_kind]


def build_backend(config: ExperimentConfig) -> ModelBackend:
    if config.backend == "table":
        return build_table_model(load_table_spec(config.table_spec))
    url = os.environ.get(REMOTE_URL_ENV) or config.remote_url
    return RemoteBackend(url, retries=config.retries)


def build_instances(config: ExperimentConfig) -> list[TaskInstance]:
    if config.task == "coin_flip":
        instances = gen_coin_flip(config.rounds, config.count, config.seed)
    elif config.task == "web_of_lies":
        instances = gen_web_of_lies(config.statements, config.count, config.seed)
    elif config.task == "arith":
        instances = gen_multistep_arithmetic(config.depth, config.length, config.count, config.seed)
    elif config.task == "year_parity":
        instances = gen_year_parity(limit=config.count if config.count else None)
    else:
        instances = load_jsonl_dataset(config.jsonl_path, _answer_spec_for(config))
    if config.limit:
        instances = instances[: config.limit]
    return instances


def build_template(config: ExperimentConfig) -> PromptTemplate:
    if config.task == "arith" and config.template == "standard_qa":
        # Inserting Q/A around a bare "expr =" input is unnatural; use it raw.
        return PromptTemplate(kind="raw")
    return PromptTemplate(kind=config.template, cot_trigger=config.cot_trigger)


def _rederive_year_parity_truth(
    backend: ModelBackend, instance: TaskInstance, config: ExperimentConfig
) -> TaskInstance | None:
    """Adjusted protocol for weak models: ask the backend for the birth year
    and grade parity against that; drop names it cannot recall."""
    prompt = f"Q: In what year was {instance.meta.get('name', '')} born?\nA:"
    try:
        prefix = backend.tokenize(prompt)
        path = greedy_decode(backend, prefix, max_steps=config.max_answer_steps, top_n=2)
    except Exception:  # noqa: BLE001 - recall failure just drops the name
        return None
    span = extract_answer(path, AnswerSpec.numeric())
    if span is None:
        return None
    year = int(float(span.canonical))
    if year <= 0:
        return None
    return dataclasses.replace(instance, ground_truth="even" if year % 2 == 0 else "odd")


def _fmt(value: float) -> str:
    return repr(value)


class _InstanceRunner:
    def __init__(self, config: ExperimentConfig, backend: ModelBackend, template: PromptTemplate):
        self.config = config
        self.backend = backend
        self.template = template
        self.top_n = config.resolved_top_n()

    def _extractor(self, spec: AnswerSpec):
        if self.config.extractor == "continuation":
            return ContinuationExtractor(
                self.backend, spec, self.config.trigger, self.config.max_answer_steps
            )
        return LastAnswerExtractor(spec)

    def _decode(self, prefix: Sequence[int], instance_seed: int) -> list[DecodedPath]:
        config = self.config
        if config.method == "greedy":
            return [greedy_decode(self.backend, prefix, config.max_steps, top_n=self.top_n)]
        if config.method in ("cot_decoding", "rank_baseline"):
            return branch_topk_decode(
                self.backend,
                prefix,
                config.k,
                config.branch_position,
                config.max_steps,
                top_n=self.top_n,
            )
        if config.method == "beam":
            return beam_search_decode(
                self.backend, prefix, config.b, config.max_steps, top_n=self.top_n
            )
        strategy = DecodeStrategy(
            kind=config.strategy,
            temperature=config.temperature,
            k=config.sample_k,
            p=config.top_p,
            seed=instance_seed,
        )
        width = self.top_n if self.backend.name != "table" else None
        return [
            sample_decode(
                self.backend,
                prefix,
                strategy,
                config.max_steps,
                top_n=width,
                sample_index=i,
            )
            for i in range(config.n_paths)
        ]

    def _select(self, scored: list[ScoredPath]) -> tuple[str | None, str]:
        config = self.config
        if config.method in ("greedy", "beam"):
            first = scored[0] if scored and scored[0].eligible else None
            if first is None:
                return None, "no_answer"
            return first.canonical, f"branch={first.branch_index} delta={_fmt(first.delta)}"
        if config.method == "rank_baseline":
            best = rank_by_logprob(scored, normalized=config.normalized)
            if best is None:
                return None, "no_answer"
            kind = "normalized_logprob" if config.normalized else "logprob"
            value = best.normalized_logprob if config.normalized else best.logprob
            return best.canonical, f"branch={best.branch_index} {kind}={_fmt(value)}"
        selector = config.selector
        if config.method == "sample" and selector == "majority":
            winner = majority_vote(scored)
            if winner is None:
                return None, "no_answer"
            votes = sum(1 for sp in scored if sp.eligible and sp.canonical == winner)
            return winner, f"winner={winner} votes={votes}"
        if selector == "aggregate":
            result = aggregate_weighted(scored)
            if result is None:
                return None, "no_answer"
            supporters = result.support[result.winner].count
            return result.winner, (
                f"winner={result.winner} sum_delta={_fmt(result.score)} supporters={supporters}"
            )
        best = select_max_confidence(scored)
        if best is None:
            return None, "no_answer"
        return best.canonical, f"branch={best.branch_index} delta={_fmt(best.delta)}"

    def run(self, index: int, instance: TaskInstance) -> tuple[ReportRow | None, dict]:
        config = self.config
        started = time.perf_counter()
        if config.year_parity_rederive and instance.meta.get("family") == "year_parity":
            adjusted = _rederive_year_parity_truth(self.backend, instance, config)
            if adjusted is None:
                # No recalled birth year: the instance is disregarded, not graded.
                return None, {"instance": _instance_dict(instance), "dropped": True, "paths": []}
            instance = adjusted
        prompt = build_prompt(instance, self.template)
        prefix = self.backend.tokenize(prompt)
        instance_seed = derive_seed(config.seed, index)
        paths = self._decode(prefix, instance_seed)
        scored = score_paths(
            paths, instance.spec, self._extractor(instance.spec), question_text=instance.question
        )
        predicted, detail = self._select(scored)
        correct = grade_prediction(predicted, instance)
        kept = sum(1 for sp in scored if not sp.filtered)
        wall_ms = (time.perf_counter() - started) * 1000.0
        row = ReportRow(instance.id, predicted, correct, detail, kept, wall_ms)
        trace = {
            "instance": _instance_dict(instance),
            "prompt": prompt,
            "prefix_ids": list(prefix),
            "method": config.method,
            "predicted": predicted,
            "correct": correct,
            "selector_detail": detail,
            "paths": [_scored_dict(sp) for sp in scored],
            "wall_time_ms": wall_ms,
        }
        return row, trace


def _instance_dict(instance: TaskInstance) -> dict:
    return {
        "id": instance.id,
        "question": instance.question,
        "ground_truth": instance.ground_truth,
        "answer_kind": instance.spec.kind,
        "options": list(instance.spec.options),
        "synonyms": dict(instance.spec.synonyms),
        "meta": dict(instance.meta),
    }


def _entry_dict(entry) -> dict:
    return {"id": entry.id, "text": entry.text, "prob": entry.prob}


def _step_dict(step: StepRecord) -> dict:
    return {
        "position": step.position,
        "chosen_id": step.chosen_id,
        "top1": _entry_dict(step.top1),
        "top2": _entry_dict(step.top2) if step.top2 is not None else None,
    }


def _path_dict(path: DecodedPath) -> dict:
    return {
        "branch_index": path.branch_index,
        "branch_position": path.branch_position,
        "token_ids": list(path.token_ids),
        "token_texts": list(path.token_texts),
        "text": path.text,
        "steps": [_step_dict(s) for s in path.steps],
        "terminated": path.terminated,
        "cumulative_logprob": path.cumulative_logprob,
        "prefix_ids": list(path.prefix_ids),
    }


def _span_dict(span: AnswerSpan) -> dict:
    data = {
        "start": span.start,
        "end": span.end,
        "canonical": span.canonical,
        "source": span.source,
    }
    if span.continuation_steps is not None:
        data["continuation_steps"] = [_step_dict(s) for s in span.continuation_steps]
    return data


def _scored_dict(sp: ScoredPath) -> dict:
    return {
        "path": _path_dict(sp.path),
        "span": _span_dict(sp.span) if sp.span is not None else None,
        "delta": sp.delta,
        "logprob": sp.logprob,
        "normalized_logprob": sp.normalized_logprob,
        "filtered": sp.filtered,
        "filter_reason": sp.filter_reason,
        "extraction_error": sp.extraction_error,
    }


def _run_metadata(config: ExperimentConfig, backend: ModelBackend) -> dict:
    notes = [
        "probabilities are taken as raw post-softmax values at temperature 1",
        "equal-probability tokens rank by ascending token id; branch ranks are strict",
    ]
    if config.template == "zero_shot_cot":
        notes.append(f"zero-shot reasoning trigger: {config.cot_trigger!r}")
    if config.task == "web_of_lies":
        notes.append("generated chains may differ distributionally from external sets")
    return {"backend_name": backend.name, "notes": notes}


def run_experiment(config: ExperimentConfig) -> Report:
    """Decode, score, select and grade every instance; accuracy is the mean
    of the per-row correctness flags.  Remote outages abort the run after
    the configured retries and flush a partial report marked incomplete."""
    config.validate()
    backend = build_backend(config)
    instances = build_instances(config)
    template = build_template(config)
    runner = _InstanceRunner(config, backend, template)
    metadata = _run_metadata(config, backend)

    rows: list[ReportRow] = []
    traces: list[dict] = []
    dropped = 0
    incomplete = False
    error = ""
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = pool.map(lambda item: runner.run(*item), enumerate(instances))
        try:
            for row, trace in results:
                if row is None:
                    dropped += 1
                else:
                    rows.append(row)
                traces.append(trace)
        except TransportError as exc:
            incomplete = True
            error = str(exc)
    if dropped:
        metadata["notes"].append(
            f"{dropped} instance(s) disregarded: backend recalled no birth year"
        )

    if config.method in ("cot_decoding", "rank_baseline"):
        short = [
            t["instance"]["id"]
            for t in traces
            if not t.get("dropped") and len(t["paths"]) < config.k
        ]
        if short:
            metadata["notes"].append(
                f"k={config.k} exceeded the reachable vocabulary on {len(short)} instance(s)"
            )

    correct = sum(1 for row in rows if row.correct)
    accuracy = correct / len(rows) if rows else 0.0
    return Report(
        config=dataclasses.asdict(config),
        rows=rows,
        traces=traces,
        accuracy=accuracy,
        metadata=metadata,
        incomplete=incomplete,
        error=error,
    )


def ensure_writable(output_dir: str | Path) -> Path:
    """Create the output directory up front so permission problems surface
    before any decoding starts."""
    path = Path(output_dir)
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write_probe"
    try:
        probe.write_text("", encoding="utf-8")
    finally:
        if probe.exists():
            probe.unlink()
    return path


def _safe_filename(instance_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", instance_id)


def emit_report(report: Report, fmt: str = "csv", output_dir: str | Path = "runs/out") -> list[Path]:
    """Write summary.json, rows.(csv|json) and per-instance trace files.

    rows.csv carries only deterministic columns so byte-identical reruns can
    be asserted; per-instance wall times live in the trace files.
    """
    out = ensure_writable(output_dir)
    written: list[Path] = []

    summary = {
        "config": report.config,
        "accuracy": report.accuracy,
        "n_instances": len(report.rows),
        "n_correct": sum(1 for r in report.rows if r.correct),
        "incomplete": report.incomplete,
        "error": report.error,
        "metadata": report.metadata,
        "total_wall_time_ms": sum(r.wall_time_ms for r in report.rows),
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", "utf-8")
    written.append(summary_path)

    columns = ["instance_id", "predicted", "correct", "selector_detail", "paths_after_filter"]
    row_dicts = [
        {
            "instance_id": r.instance_id,
            "predicted": "" if r.predicted is None else r.predicted,
            "correct": str(r.correct).lower(),
            "selector_detail": r.selector_detail,
            "paths_after_filter": str(r.paths_after_filter),
        }
        for r in report.rows
    ]
    if fmt == "csv":
        rows_path = out / "rows.csv"
        with open(rows_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            writer.writerows(row_dicts)
    elif fmt == "json":
        rows_path = out / "rows.json"
        rows_path.write_text(json.dumps(row_dicts, indent=2) + "\n", "utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    written.append(rows_path)

    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    for trace in report.traces:
        trace_path = trace_dir / f"{_safe_filename(trace['instance']['id'])}.json"
        trace_path.write_text(json.dumps(trace, indent=2) + "\n", "utf-8")
        written.append(trace_path)
    return written


def _margin_from_step(step: dict) -> float:
    top2 = step.get("top2")
    return step["top1"]["prob"] - (top2["prob"] if top2 else 0.0)


def _entry_from_dict(data: dict | None):
    from .backends import TokenEntry

    if data is None:
        return None
    return TokenEntry(data["id"], data["text"], data["prob"])


def _step_from_dict(data: dict) -> StepRecord:
    return StepRecord(
        position=data["position"],
        chosen_id=data["chosen_id"],
        top1=_entry_from_dict(data["top1"]),
        top2=_entry_from_dict(data.get("top2")),
    )


def _path_from_dict(data: dict) -> DecodedPath:
    return DecodedPath(
        branch_index=data["branch_index"],
        branch_position=data["branch_position"],
        token_ids=tuple(data["token_ids"]),
        token_texts=tuple(data["token_texts"]),
        text=data["text"],
        steps=tuple(_step_from_dict(s) for s in data["steps"]),
        terminated=data["terminated"],
        cumulative_logprob=data["cumulative_logprob"],
        prefix_ids=tuple(data["prefix_ids"]),
    )


def _scored_from_dict(entry: dict) -> ScoredPath:
    span_data = entry.get("span")
    span = None
    if span_data is not None:
        continuation = span_data.get("continuation_steps")
        span = AnswerSpan(
            start=span_data["start"],
            end=span_data["end"],
            canonical=span_data["canonical"],
            source=span_data["source"],
            continuation_steps=(
                tuple(_step_from_dict(s) for s in continuation)
                if continuation is not None
                else None
            ),
        )
    return ScoredPath(
        path=_path_from_dict(entry["path"]),
        span=span,
        delta=entry.get("delta"),
        logprob=entry["logprob"],
        normalized_logprob=entry["normalized_logprob"],
        filtered=entry.get("filtered", False),
        filter_reason=entry.get("filter_reason"),
        extraction_error=entry.get("extraction_error"),
    )


def _reselect_from_trace(trace: dict, config: dict) -> str | None:
    """Re-run the selector over paths rebuilt purely from the trace file."""
    scored = [_scored_from_dict(entry) for entry in trace["paths"]]
    method = config["method"]
    if method in ("greedy", "beam"):
        return scored[0].canonical if scored and scored[0].eligible else None
    if method == "rank_baseline":
        best = rank_by_logprob(scored, normalized=config["normalized"])
        return best.canonical if best else None
    if method == "sample" and config["selector"] == "majority":
        return majority_vote(scored)
    if config["selector"] == "aggregate":
        result = aggregate_weighted(scored)
        return result.winner if result else None
    best = select_max_confidence(scored)
    return best.canonical if best else None


def _recompute_delta(entry: dict) -> float | None:
    span = entry.get("span")
    if span is None:
        return None
    if span.get("continuation_steps") is not None:
        steps = span["continuation_steps"]
    else:
        steps = entry["path"]["steps"][span["start"] : span["end"]]
    if not steps:
        return None
    return sum(_margin_from_step(s) for s in steps) / len(steps)


def replay_run(run_dir: str | Path, tolerance: float = 1e-9) -> dict:
    """Recompute every confidence value and selector decision from the
    emitted traces and compare against the recorded ones; the traces alone
    must be sufficient."""
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    config = None
    if summary_path.exists():
        config = json.loads(summary_path.read_text("utf-8"))["config"]
    checked = 0
    mismatches: list[dict] = []
    for trace_path in sorted((run_dir / "traces").glob("*.json")):
        trace = json.loads(trace_path.read_text("utf-8"))
        if trace.get("dropped"):
            continue
        for entry in trace["paths"]:
            recorded = entry.get("delta")
            recomputed = _recompute_delta(entry)
            if recorded is None and recomputed is None:
                continue
            checked += 1
            if (
                recorded is None
                or recomputed is None
                or not math.isclose(recorded, recomputed, rel_tol=0.0, abs_tol=tolerance)
            ):
                mismatches.append(
                    {
                        "instance": trace["instance"]["id"],
                        "branch_index": entry["path"]["branch_index"],
                        "recorded": recorded,
                        "recomputed": recomputed,
                    }
                )
        if config is not None:
            checked += 1
            reselected = _reselect_from_trace(trace, config)
            if reselected != trace["predicted"]:
                mismatches.append(
                    {
                        "instance": trace["instance"]["id"],
                        "branch_index": None,
                        "recorded": trace["predicted"],
                        "recomputed": reselected,
                    }
                )
    return {"checked": checked, "mismatches": mismatches, "ok": not mismatches}


def format_trace(run_dir: str | Path, instance_id: str) -> str:
    """Human-readable path tree for one instance, with per-step margins."""
    trace_path = Path(run_dir) / "traces" / f"{_safe_filename(instance_id)}.json"
    trace = json.loads(trace_path.read_text("utf-8"))
    lines = [
        f"instance {trace['instance']['id']}",
        f"question: {trace['instance']['question']}",
        f"predicted: {trace['predicted']}  correct: {trace['correct']}  ({trace['selector_detail']})",
    ]
    for entry in trace["paths"]:
        path = entry["path"]
        delta = entry.get("delta")
        header = f"path k={path['branch_index']} (branch at step {path['branch_position']})"
        if delta is not None:
            header += f"  delta={delta:.6g}"
        if entry.get("filtered"):
            header += f"  [filtered: {entry.get('filter_reason')}]"
        lines.append(header)
        lines.append(f"  text: {path['text']!r}  ({path['terminated']}, "
                     f"logprob={path['cumulative_logprob']:.6g})")
        span = entry.get("span")
        if span and span.get("continuation_steps") is None:
            answer_range: Sequence[int] = range(span["start"], span["end"])
        else:
            answer_range = ()
        for step in path["steps"]:
            marker = "*" if step["position"] == path["branch_position"] else " "
            answer_mark = "A" if span and step["position"] in answer_range else " "
            top2 = step.get("top2")
            second = f"{top2['text']!r} p={top2['prob']:.4g}" if top2 else "-"
            lines.append(
                f"  {marker}{answer_mark} step {step['position']:>3}: chose {step['chosen_id']:>4}"
                f"  top1 {step['top1']['text']!r} p={step['top1']['prob']:.4g}"
                f"  top2 {second}  margin={_margin_from_step(step):.4g}"
            )
    return "\n".join(lines)
