"""Table model construction, distributions, tokenization, invariants."""

from __future__ import annotations

import json
import random
from concurrent.futures import ThreadPoolExecutor

import pytest

from cotdecode.backends import (
    InvalidSpec,
    TableModelSpec,
    build_table_model,
    load_table_spec,
)
from oracle_helpers import oracle_probs, oracle_ranking, random_table_spec, simple_spec


def test_single_outcome_normalizes_to_one():
    model = build_table_model(simple_spec(["a", "b", "<eos>"], {"a": 1}))
    dist = model.next_token_distribution([0], top_n=2)
    assert dist.entries[0].id == 0 and dist.entries[0].prob == 1.0
    assert dist.entries[1].prob == 0.0
    assert dist.truncated_mass == 0.0


def test_fallback_weights_normalize():
    model = build_table_model(simple_spec(["a", "b", "<eos>"], {"a": 3, "b": 1}))
    for context in ([0], [1], [0, 1, 0]):
        dist = model.next_token_distribution(context, top_n=2)
        assert dist.entries[0] == dist.entries[0].__class__(0, "a", 0.75)
        assert dist.entries[1].prob == 0.25


def test_order1_rule_matches_hand_normalization():
    # Oracle: normalize the weights by hand inside the test.
    weights = {"b": 1, "<eos>": 1}
    spec = simple_spec(
        ["a", "b", "<eos>"], {"a": 1}, rules={("a",): weights}, order=1
    )
    model = build_table_model(spec)
    dist = model.next_token_distribution([1, 0], top_n=3)
    total = sum(weights.values())
    expected = {1: weights["b"] / total, 2: weights["<eos>"] / total}
    got = {e.id: e.prob for e in dist.entries if e.prob > 0}
    assert got == expected


def test_top_n_truncation_reports_mass():
    spec = simple_spec(
        ["a", "b", "c", "d", "<eos>"], {"a": 5, "b": 4, "c": 3, "d": 2, "<eos>": 1}
    )
    model = build_table_model(spec)
    dist = model.next_token_distribution([0], top_n=2)
    # Recompute the full distribution from the weights and sort.
    probs = oracle_probs(spec, [0])
    ranked = oracle_ranking(probs)
    assert [e.id for e in dist.entries] == ranked[:2]
    assert dist.truncated_mass == pytest.approx(1.0 - probs[ranked[0]] - probs[ranked[1]], abs=1e-12)


def test_top_n_below_two_rejected():
    model = build_table_model(simple_spec(["a", "<eos>"], {"a": 1}))
    with pytest.raises(ValueError):
        model.next_token_distribution([0], top_n=1)


def test_invalid_context_token_rejected():
    model = build_table_model(simple_spec(["a", "<eos>"], {"a": 1}))
    with pytest.raises(ValueError):
        model.next_token_distribution([7], top_n=2)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda s: s | {"vocab": ()}, "vocab is empty"),
        (lambda s: s | {"eos_text": "<end>"}, "end-of-sequence"),
        (lambda s: s | {"fallback": ()}, "fallback"),
        (lambda s: s | {"fallback": ((5, 1.0),)}, "fallback"),
        (lambda s: s | {"fallback": ((0, 0.0),)}, "no strictly positive"),
    ],
)
def test_construction_errors(mutate, message):
    base = {
        "vocab": ("a", "b", "<eos>"),
        "order": 1,
        "rules": {},
        "fallback": ((0, 1.0),),
        "eos_text": "<eos>",
    }
    data = mutate(base)
    with pytest.raises(InvalidSpec, match=message):
        build_table_model(TableModelSpec(**data))


def test_construction_error_names_offending_rule():
    spec = TableModelSpec(
        vocab=("a", "b", "<eos>"),
        order=1,
        rules={(0,): ((9, 1.0),)},
        fallback=((0, 1.0),),
    )
    with pytest.raises(InvalidSpec, match=r"rule for context \(0,\)"):
        build_table_model(spec)


def test_tie_break_by_ascending_id():
    model = build_table_model(simple_spec(["a", "b", "c", "<eos>"], {"b": 1, "c": 1, "a": 1}))
    dist = model.next_token_distribution([0], top_n=4)
    assert [e.id for e in dist.entries] == [0, 1, 2, 3]


def test_determinism_repeated_queries():
    rng = random.Random(7)
    model = build_table_model(random_table_spec(rng))
    context = [0]
    first = model.next_token_distribution(context, top_n=4)
    for _ in range(1000):
        assert model.next_token_distribution(context, top_n=4) == first


def test_normalization_property_random_specs():
    rng = random.Random(11)
    for _ in range(100):
        spec = random_table_spec(rng)
        model = build_table_model(spec)
        context = [rng.randrange(model.vocab_size) for _ in range(rng.randint(1, 4))]
        top_n = rng.randint(2, model.vocab_size + 2)
        dist = model.next_token_distribution(context, top_n)
        dist.validate(tol=1e-6)
        total = sum(e.prob for e in dist.entries) + dist.truncated_mass
        assert abs(total - 1.0) <= 1e-6
        assert len(dist.entries) >= 2


def test_monotone_truncation():
    rng = random.Random(13)
    for _ in range(50):
        spec = random_table_spec(rng)
        model = build_table_model(spec)
        context = [rng.randrange(model.vocab_size)]
        small = model.next_token_distribution(context, 2)
        large = model.next_token_distribution(context, model.vocab_size)
        assert large.entries[:2] == small.entries


def test_concurrent_queries_are_safe():
    rng = random.Random(17)
    model = build_table_model(random_table_spec(rng))
    contexts = [[rng.randrange(model.vocab_size)] for _ in range(32)]
    expected = [model.next_token_distribution(c, 3) for c in contexts]
    with ThreadPoolExecutor(max_workers=16) as pool:
        for _ in range(20):
            got = list(pool.map(lambda c: model.next_token_distribution(c, 3), contexts))
            assert got == expected


def test_tokenize_longest_match_and_roundtrip():
    model = build_table_model(
        simple_spec(["a", "ab", "b", " so", "<eos>"], {"a": 1})
    )
    assert model.tokenize("ab") == [1]
    assert model.tokenize("aab so") == [0, 1, 3]
    assert model.detokenize([0, 1, 3]) == "aab so"
    with pytest.raises(ValueError, match="offset"):
        model.tokenize("abz")


def test_eos_renders_empty():
    model = build_table_model(simple_spec(["a", "<eos>"], {"a": 1}))
    assert model.detokenize([0, 1]) == "a"
    dist = model.next_token_distribution([0], top_n=2)
    eos_entry = next(e for e in dist.entries if e.id == model.eos_id)
    assert eos_entry.text == ""


def test_spec_json_roundtrip(tmp_path):
    data = {
        "vocab": ["a", "b", "<eos>"],
        "eos": "<eos>",
        "order": 1,
        "rules": [{"context": ["a"], "weights": {"b": 2, "<eos>": 1}}],
        "fallback": {"a": 1},
    }
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(data), "utf-8")
    model = build_table_model(load_table_spec(path))
    dist = model.next_token_distribution([0], top_n=3)
    assert dist.entries[0].id == 1
    assert dist.entries[0].prob == pytest.approx(2 / 3)


def test_spec_json_unknown_token_rejected(tmp_path):
    data = {"vocab": ["a", "<eos>"], "rules": [], "fallback": {"zz": 1}}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(data), "utf-8")
    with pytest.raises(InvalidSpec, match="zz"):
        load_table_spec(path)
