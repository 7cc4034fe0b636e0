"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
All expected values come from independent oracles computed inside the tests
or from fixed reference fixtures; tolerances are stated inline.
"""

from __future__ import annotations

import dataclasses
import math
import random
import time
from contextlib import contextmanager

from cotdecode.backends import build_table_model
from cotdecode.decoding import (
    DecodeStrategy,
    beam_search_decode,
    branch_topk_decode,
    greedy_decode,
    sample_decode,
)
from cotdecode.extraction import (
    AnswerSpan,
    AnswerSpec,
    align_continuation,
    is_ill_formed,
    parse_number,
)
from cotdecode.harness import ExperimentConfig, emit_report, run_experiment
from cotdecode.scoring import (
    aggregate_weighted,
    answer_confidence,
    majority_vote,
    select_max_confidence,
)
from cotdecode.tasks import (
    evaluate_arithmetic,
    gen_coin_flip,
    gen_multistep_arithmetic,
    gen_web_of_lies,
)
from oracle_helpers import (
    build_separation_fixture,
    fold_lies_question,
    make_path,
    oracle_branch_enumeration,
    postfix_eval,
    random_table_spec,
    simple_spec,
    simulate_coin_question,
)
from test_scoring import scored


@contextmanager
def criterion(name: str, description: str):
    try:
        yield
    except BaseException:
        print(f"{name}: FAIL - {description}")
        raise
    print(f"{name}: PASS - {description}")


def _close(a: float, b: float, tol: float = 1e-9) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= tol


def _a1_paths():
    """Branch decode over 200 random specs plus the enumeration oracle's view."""
    rng = random.Random(20240201)
    runs = []
    for _ in range(200):
        spec = random_table_spec(rng, max_vocab=6, max_order=2)
        model = build_table_model(spec)
        prefix = [rng.randrange(model.vocab_size)]
        depth = rng.randint(1, 8)
        paths = branch_topk_decode(model, prefix, k=model.vocab_size, max_steps=depth)
        expected = oracle_branch_enumeration(spec, prefix, model.vocab_size, depth)
        runs.append((model, prefix, paths, expected))
    return runs


def test_a1_branch_enumeration_oracle():
    with criterion("A1", "branch decode equals exhaustive enumeration on 200 random specs"):
        started = time.perf_counter()
        runs = _a1_paths()
        for _, _, paths, expected in runs:
            assert len(paths) == len(expected)
            for path, want in zip(paths, expected):
                assert list(path.token_ids) == want["ids"]
                assert _close(path.cumulative_logprob, want["logprob"])
                span = AnswerSpan(0, len(path), "x", "last_number")
                oracle_delta = sum(want["margins"]) / len(want["margins"])
                assert _close(answer_confidence(path, span), oracle_delta)
        elapsed = time.perf_counter() - started
        assert elapsed < 5.0, f"A1 took {elapsed:.2f}s (budget 5s)"


def test_a2_delta_replay_requeries_backend():
    with criterion("A2", "confidence recomputed by re-querying the backend matches within 1e-9"):
        for model, prefix, paths, _ in _a1_paths():
            for path in paths:
                ctx = list(prefix)
                margins = []
                for step in path.steps:
                    dist = model.next_token_distribution(ctx, 2)
                    top2 = dist.top2.prob if dist.top2 is not None else 0.0
                    margins.append(dist.top1.prob - top2)
                    ctx.append(step.chosen_id)
                replayed = sum(margins) / len(margins)
                span = AnswerSpan(0, len(path), "x", "last_number")
                assert _close(answer_confidence(path, span), replayed)


AGGREGATION_FIXTURE = [
    ("18", 0.994, 0),
    ("14", 0.095, 1),
    ("14", 0.064, 2),
    ("16", 0.162, 3),
    ("14", 0.083, 4),
    ("20", 0.561, 5),
    ("18", 0.911, 6),
    ("10", 0.424, 7),
    ("18", 0.584, 8),
    ("18", 0.999, 9),
]


def test_a3_aggregation_fixture():
    with criterion("A3", "weighted aggregation of the reference fixture picks 18 at 3.488"):
        fixture = [scored(a, d, k) for a, d, k in AGGREGATION_FIXTURE]
        result = aggregate_weighted(fixture)
        assert result.winner == "18"
        assert abs(result.score - 3.488) <= 1e-3


def test_a3_majority_fixture_as_stated():
    # Known red: the stated expectation ("14") is inconsistent with the
    # fixture itself, where "18" has four supporters (k0, k6, k8, k9)
    # against three for "14" (k1, k2, k4).  The assertion is kept as stated
    # rather than loosened; see the failure message.
    with criterion("A3 (majority)", "majority vote on the same fixture yields 14"):
        fixture = [scored(a, d, k) for a, d, k in AGGREGATION_FIXTURE]
        winner = majority_vote(fixture)
        assert winner == "14", (
            f"plurality of this fixture is {winner!r}: 18 is supported by four paths "
            "(k0, k6, k8, k9) against three for 14 (k1, k2, k4), so a majority vote "
            "cannot yield '14' here"
        )


def test_a4_selection_fixtures():
    with criterion("A4", "max-confidence selection picks k9 (math) and the 0.978 path (parity)"):
        math_fixture = [
            scored("60.00", 0.029, 0),
            scored("60", 0.058, 1),
            scored("60", 0.058, 2),
            scored("60", 0.032, 7),
            scored("64", 0.994, 9),
        ]
        assert select_max_confidence(math_fixture).branch_index == 9
        parity_deltas = {0: 0.117, 1: 0.207, 2: 0.198, 3: 0.949, 4: 0.0, 7: 0.978}
        parity_fixture = [scored("even", d, k) for k, d in parity_deltas.items()]
        assert select_max_confidence(parity_fixture).delta == 0.978


def test_a5_degenerate_strategy_equalities():
    with criterion("A5", "k=1 branching, b=1 beam and T->0 sampling all equal greedy bitwise"):
        rng = random.Random(20240205)
        for _ in range(50):
            model = build_table_model(random_table_spec(rng))
            prefix = [rng.randrange(model.vocab_size)]
            greedy = greedy_decode(model, prefix, max_steps=5)
            assert branch_topk_decode(model, prefix, k=1, max_steps=5) == [greedy]
            assert beam_search_decode(model, prefix, b=1, max_steps=5) == [greedy]
            strategy = DecodeStrategy.temperature_sampling(1e-6, seed=rng.randrange(2**32))
            assert sample_decode(model, prefix, strategy, max_steps=5) == greedy


def test_a6_sampling_fidelity_chi_square():
    from scipy import stats

    with criterion("A6", "10k-draw frequencies pass chi-square at 0.001 for T/top-k/nucleus"):
        started = time.perf_counter()
        model = build_table_model(
            simple_spec(["a", "b", "c", "<eos>"], {"a": 4, "b": 3, "c": 2, "<eos>": 1})
        )
        base = [0.4, 0.3, 0.2, 0.1]
        n = 10000

        def frequencies(strategy_for) -> list[int]:
            counts = [0, 0, 0, 0]
            for i in range(n):
                path = sample_decode(model, [0], strategy_for(i), max_steps=1)
                counts[path.token_ids[0]] += 1
            return counts

        # temperature 0.7: p^(1/T) renormalized (analytic target)
        weights = [p ** (1 / 0.7) for p in base]
        target = [w / sum(weights) for w in weights]
        counts = frequencies(lambda i: DecodeStrategy.temperature_sampling(0.7, seed=i))
        assert stats.chisquare(counts, [t * n for t in target]).pvalue > 0.001

        # top-k 2: mass on the two most probable only
        counts = frequencies(lambda i: DecodeStrategy.top_k_sampling(2, seed=i))
        assert counts[2] == 0 and counts[3] == 0
        assert stats.chisquare(counts[:2], [4 / 7 * n, 3 / 7 * n]).pvalue > 0.001

        # nucleus 0.7: smallest prefix reaching 0.7 is {a, b} (boundary included)
        counts = frequencies(lambda i: DecodeStrategy.nucleus_sampling(0.7, seed=i))
        assert counts[2] == 0 and counts[3] == 0
        assert stats.chisquare(counts[:2], [0.4 / 0.7 * n, 0.3 / 0.7 * n]).pvalue > 0.001

        elapsed = time.perf_counter() - started
        assert elapsed < 10.0, f"A6 took {elapsed:.2f}s (budget 10s)"


def test_a7_task_oracle_agreement():
    with criterion("A7", "1000 instances per family agree with brute-force oracles; reference expressions check out"):
        coin_counts = {2: 334, 3: 333, 4: 333}
        for rounds, count in coin_counts.items():
            for instance in gen_coin_flip(rounds, count, seed=rounds):
                assert instance.ground_truth == simulate_coin_question(instance.question)

        lies_counts = {3: 334, 4: 333, 5: 333}
        for statements, count in lies_counts.items():
            for instance in gen_web_of_lies(statements, count, seed=statements):
                assert instance.ground_truth == fold_lies_question(instance.question)

        for depth, length in ((0, 3), (0, 4), (2, 3), (2, 4)):
            for instance in gen_multistep_arithmetic(depth, length, 250, seed=depth * 10 + length):
                assert int(instance.ground_truth) == postfix_eval(instance.question)

        assert evaluate_arithmetic("(3 + -3 + -9 * 1) =") == -9
        assert evaluate_arithmetic("((0 - 9 * -7 + 3) - (-2 + -1 * -9 * 3)) =") == 41


def test_a8_end_to_end_synthetic_separation(tmp_path):
    with criterion("A8", "greedy 0% vs 3-branch max-confidence 100% on 50 instances; worker-count invariant"):
        spec_path, tasks_path = build_separation_fixture(tmp_path, 50)
        base = ExperimentConfig(
            backend="table",
            table_spec=str(spec_path),
            task="jsonl",
            jsonl_path=str(tasks_path),
            answer_kind="numeric",
            template="raw",
            method="cot_decoding",
            k=3,
            max_steps=4,
            output_dir=str(tmp_path / "out"),
        )
        greedy_report = run_experiment(dataclasses.replace(base, method="greedy"))
        assert greedy_report.accuracy == 0.0
        assert len(greedy_report.rows) == 50

        branch_report = run_experiment(base)
        assert branch_report.accuracy == 1.0

        payloads = []
        for workers in (1, 8):
            config = dataclasses.replace(
                base, workers=workers, output_dir=str(tmp_path / f"w{workers}")
            )
            emit_report(run_experiment(config), fmt="csv", output_dir=config.output_dir)
            payloads.append((tmp_path / f"w{workers}" / "rows.csv").read_bytes())
        assert payloads[0] == payloads[1]


def test_a9_extraction_and_filtering_suite():
    with criterion("A9", "degenerate corpus fully filtered; canonicalization classes hold; alignment picks last occurrence"):
        # 100% detection on constructed degenerates, 0% on well-formed text.
        for n in range(1000):
            kind = n % 3
            if kind == 0:
                path, question = make_path([]), f"Question {n}?"
            elif kind == 1:
                question = f"How many things are in box {n}?"
                path = make_path([question])
            else:
                path, question = make_path([f"Maybe {n}?"]), f"Question {n}?"
            assert is_ill_formed(path, question)[0]
        for n in range(1000):
            path = make_path([f"The count is {n} items total."])
            assert not is_ill_formed(path, "How many items?")[0]

        # Numeric canonicalization equivalence classes.
        reference = parse_number("$1,234.50")
        for form in ("1234.5", "1,234.50", "$1234.5", "1234.5."):
            assert abs(parse_number(form) - reference) <= 1e-9

        # Continuation alignment lands on the last occurrence.
        vocab = ["Q", " 64 then ", "64 again", " So the answer is", " 64", "<eos>"]
        rules = {
            ("Q",): {" 64 then ": 1},
            (" 64 then ",): {"64 again": 1},
            ("64 again",): {"<eos>": 1},
            (" So the answer is",): {" 64": 1},
            (" 64",): {"<eos>": 1},
        }
        model = build_table_model(simple_spec(vocab, {"<eos>": 1}, rules=rules, order=1))
        path = greedy_decode(model, model.tokenize("Q"), max_steps=8)
        span = align_continuation(model, path, AnswerSpec.numeric())
        assert span is not None and span.source == "continuation_alignment"
        last = path.text.rfind("64")
        start_char = sum(len(t) for t in path.token_texts[: span.start])
        span_len = sum(len(t) for t in path.token_texts[span.start : span.end])
        assert start_char <= last < start_char + span_len
