"""Verify the synthetic task generators and their validity oracles."""

import pytest

from editdiff.tasks import (
    THREE_SUMS,
    TaskKind,
    TaskSpec,
    balanced_strings,
    bracket_depth,
    make_task,
    split_corpus,
)
from editdiff.types import ConfigError


def test_make_task__three_sums__three_valid_sentences(three_sums):
    vocab = three_sums.vocab
    assert [vocab.render(s) for s in three_sums.corpus] == [
        "calc | 2 + 2 = 4",
        "calc | 2 + 3 = 5",
        "calc | 3 + 2 = 5",
    ]
    assert all(three_sums.is_valid(s) for s in three_sums.corpus)


@pytest.mark.parametrize(
    "target,prompt,expect",
    [
        pytest.param("2 + 3 = 5", "calc", True, id="correct"),
        pytest.param("2 + 2 = 5", "calc", False, id="wrong_sum"),
        pytest.param("2 + 2 =", "calc", False, id="incomplete"),
        pytest.param("2 = 2 + 4", "calc", False, id="misplaced_operators"),
        pytest.param("2 + 2 = 4", "=", False, id="wrong_prompt"),
    ],
)
def test_arithmetic_oracle__various_regions__judged(three_sums, target, prompt, expect):
    seq = three_sums.vocab.sequence(target, prompt)
    assert three_sums.is_valid(seq) is expect


def test_arithmetic_oracle__region_without_eos__invalid(three_sums):
    vocab = three_sums.vocab
    seq = vocab.sequence("2 + 2 = 4", "calc")
    truncated = seq.with_region(seq.region[:-1])
    assert not three_sums.is_valid(truncated)


def test_make_task__full_operand_range__all_pairs():
    task = make_task(TaskSpec(TaskKind.ARITHMETIC, operand_min=0, operand_max=2))
    assert len(task.corpus) == 9
    assert len(set(task.corpus)) == 9
    assert "4" in task.vocab.symbols


@pytest.mark.parametrize(
    "spec",
    [
        pytest.param(TaskSpec(TaskKind.ARITHMETIC, operand_min=3, operand_max=2), id="empty_range"),
        pytest.param(
            TaskSpec(TaskKind.ARITHMETIC, operand_min=0, operand_max=1, pairs=((1, 5),)),
            id="pair_out_of_range",
        ),
        pytest.param(TaskSpec(TaskKind.BRACKETS, max_depth=0), id="no_depth"),
        pytest.param(TaskSpec(TaskKind.BRACKETS, max_len=1), id="too_short"),
        pytest.param(TaskSpec(TaskKind.KEYED_COPY, max_pairs=5, num_keys=4), id="too_many_pairs"),
        pytest.param(TaskSpec(TaskKind.KEYED_COPY, value_len=0), id="no_value"),
    ],
)
def test_make_task__bad_parameters__raises_config_error(spec):
    with pytest.raises(ConfigError):
        make_task(spec)


@pytest.mark.parametrize(
    "symbols,expect",
    [
        pytest.param("()", 1, id="flat"),
        pytest.param("(())()", 2, id="nested"),
        pytest.param(")(", None, id="closes_first"),
        pytest.param("(()", None, id="unclosed"),
        pytest.param("(x)", None, id="foreign_symbol"),
    ],
)
def test_bracket_depth__various_strings__depth_or_none(symbols, expect):
    assert bracket_depth(tuple(symbols)) == expect


def test_balanced_strings__length_four__catalan_count():
    assert list(balanced_strings(4, 3)) == ["( )", "( ( ) )", "( ) ( )"]
    assert len(list(balanced_strings(6, 3))) == 1 + 2 + 5
    assert "( ( ( ) ) )" not in list(balanced_strings(6, 2))


def test_make_task__brackets__corpus_valid_and_depth_enforced():
    task = make_task(TaskSpec(TaskKind.BRACKETS, max_depth=2, max_len=6))
    assert all(task.is_valid(s) for s in task.corpus)
    vocab = task.vocab
    assert not task.is_valid(vocab.sequence("( ( ( ) ) )", "brackets"))
    assert not task.is_valid(vocab.sequence("( ) )", "brackets"))
    assert not task.is_valid(vocab.sequence("", "brackets"))


def test_make_task__keyed_copy__deterministic_distinct_and_valid():
    spec = TaskSpec(TaskKind.KEYED_COPY, num_sequences=30, seed=3)
    first, second = make_task(spec), make_task(spec)
    assert first.corpus == second.corpus
    assert len(first.corpus) == 30
    assert len(set(first.corpus)) == 30
    assert all(first.is_valid(s) for s in first.corpus)


def test_keyed_copy_oracle__wrong_value__invalid():
    task = make_task(TaskSpec(TaskKind.KEYED_COPY, num_sequences=1))
    vocab = task.vocab
    seq = task.corpus[0]
    prompt = " ".join(vocab.decode(seq.prompt))
    body = vocab.decode(seq.region[:-1])
    wrong = ["a" if s != "a" else "b" for s in body]
    assert task.is_valid(vocab.sequence(list(body), prompt))
    assert not task.is_valid(vocab.sequence(wrong, prompt))


def test_split_corpus__same_seed__disjoint_and_deterministic():
    task = make_task(TaskSpec(TaskKind.ARITHMETIC, operand_min=0, operand_max=3))
    train, held_out = split_corpus(task.corpus, 0.25, seed=1)
    assert (train, held_out) == split_corpus(task.corpus, 0.25, seed=1)
    assert len(held_out) == 4
    assert not set(train) & set(held_out)
    assert set(train) | set(held_out) == set(task.corpus)


def test_split_corpus__tiny_fraction__holds_out_at_least_one(three_sums):
    train, held_out = split_corpus(three_sums.corpus, 0.01, seed=0)
    assert len(held_out) == 1
    assert len(train) == 2


@pytest.mark.parametrize("fraction", [0.0, 0.5])
def test_split_corpus__zero_fraction_or_single_sequence__uses_whole_corpus(
    three_sums, fraction
):
    corpus = three_sums.corpus if fraction == 0.0 else three_sums.corpus[:1]
    assert split_corpus(corpus, fraction, seed=0) == (corpus, corpus)


@pytest.mark.parametrize("fraction", [-0.1, 1.0])
def test_split_corpus__fraction_out_of_range__raises_config_error(three_sums, fraction):
    with pytest.raises(ConfigError):
        split_corpus(three_sums.corpus, fraction, seed=0)


def test_three_sums__spec__is_the_restricted_arithmetic_task():
    assert THREE_SUMS.kind is TaskKind.ARITHMETIC
    assert THREE_SUMS.pairs == ((2, 2), (2, 3), (3, 2))
