"""Verify the forward masking process and the denoising loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from editdiff.corruption import LOG_FLOOR, corrupt, denoising_loss
from editdiff.types import CorruptionConfig, CorruptionError, MaskedSequence, Sequence

from .utils import ABC, one_hot_rows, seq, uniform_unmask_rows


def test_corrupt__same_seed__same_output():
    x0 = seq("abcdxyzabc")
    cfg = CorruptionConfig(0.5, rng_seed=7)
    assert corrupt(x0, cfg, ABC) == corrupt(x0, cfg, ABC)


def test_corrupt__noise_level_one__masks_whole_region_but_not_prompt():
    x0 = seq("abc", "dx")
    xt = corrupt(x0, CorruptionConfig(1.0), ABC)
    assert xt.prompt_len == 2
    assert xt.tokens[:2] == x0.prompt
    assert xt.tokens[2:] == (ABC.mask_id,) * 4
    assert xt.masked == (True,) * 4


@given(
    target=st.text(alphabet="abcdxyz", min_size=1, max_size=12),
    prompt=st.text(alphabet="abcdxyz", max_size=4),
    t=st.floats(min_value=0.01, max_value=1.0),
    rng_seed=st.integers(min_value=0, max_value=2**32),
)
def test_corrupt__any_input__only_masks_region_and_keeps_other_tokens(
    target, prompt, t, rng_seed
):
    x0 = seq(target, prompt)
    xt = corrupt(x0, CorruptionConfig(t, rng_seed), ABC)
    assert xt.prompt_len == x0.prompt_len
    for i, (a, b) in enumerate(zip(x0.tokens, xt.tokens)):
        if i < x0.prompt_len:
            assert a == b
        else:
            assert b in (a, ABC.mask_id)
            assert xt.masked[i - x0.prompt_len] == (b == ABC.mask_id)


@pytest.mark.parametrize("t", [0.25, 0.5, 0.75])
def test_corrupt__hundred_thousand_positions__masked_fraction_within_one_point(t):
    x0 = seq("abcdxyz" * 14 + "a")  # 100 generated positions with EOS
    assert len(x0.region) == 100
    masked = [corrupt(x0, CorruptionConfig(t, s), ABC).masked for s in range(1000)]
    assert abs(np.mean(masked) - t) <= 0.01


def test_corrupt__mask_in_input__raises_corruption_error():
    x0 = seq("ab").with_region((ABC.mask_id, ABC.eos_id))
    with pytest.raises(CorruptionError):
        corrupt(x0, CorruptionConfig(0.5), ABC)


def _fully_masked(target: str):
    x0 = seq(target)
    return x0, corrupt(x0, CorruptionConfig(1.0), ABC)


def test_denoising_loss__perfect_prediction__is_zero():
    x0, xt = _fully_masked("abc")
    pred = one_hot_rows(x0.tokens, len(ABC))
    assert denoising_loss(pred, x0, xt, 1.0) == 0.0


def test_denoising_loss__uniform_prediction__is_log_codomain_size_over_t():
    x0, xt = _fully_masked("abc")
    pred = uniform_unmask_rows(ABC, 4)
    size = len(ABC) - 3  # no MASK, DEL or PAD
    assert denoising_loss(pred, x0, xt, 0.5) == pytest.approx(math.log(size) / 0.5)


def test_denoising_loss__zero_on_true_token__clamped_at_floor():
    x0, xt = _fully_masked("a")
    wrong = [ABC.id("b"), ABC.id("b")]
    loss = denoising_loss(one_hot_rows(wrong, len(ABC)), x0, xt, 1.0)
    assert loss == pytest.approx(-LOG_FLOOR)
    assert math.isfinite(loss)


def test_denoising_loss__no_masked_positions__is_zero():
    x0 = seq("ab")
    xt = MaskedSequence(x0, (False, False, False))
    assert denoising_loss(np.zeros((0, len(ABC))), x0, xt, 0.3) == 0.0


@pytest.mark.parametrize(
    "rows,t",
    [
        pytest.param(3, 1.0, id="too_few_rows"),
        pytest.param(4, 0.0, id="zero_noise"),
    ],
)
def test_denoising_loss__bad_inputs__raise_corruption_error(rows, t):
    x0, xt = _fully_masked("abc")
    with pytest.raises(CorruptionError):
        denoising_loss(uniform_unmask_rows(ABC, rows), x0, xt, t)


def test_denoising_loss__rows_not_normalized__raise_corruption_error():
    x0, xt = _fully_masked("abc")
    with pytest.raises(CorruptionError, match="sum to 1"):
        denoising_loss(np.full((4, len(ABC)), 0.5), x0, xt, 1.0)


@settings(max_examples=30)
@given(rng_seed=st.integers(min_value=0, max_value=2**32))
def test_denoising_loss__uniform_rows__scales_with_masked_count(rng_seed):
    x0 = seq("abcd")
    xt = corrupt(x0, CorruptionConfig(0.5, rng_seed), ABC)
    count = len(xt.masked_positions)
    loss = denoising_loss(uniform_unmask_rows(ABC, count), x0, xt, 0.5)
    size = len(ABC) - 3
    assert loss == pytest.approx(count * math.log(size) / (0.5 * 5))


def test_denoising_loss__one_masked_half_right__is_log_two():
    x0 = seq("abc")  # a b c <eos>: L = 4
    tokens = (ABC.id("a"), ABC.mask_id, ABC.id("c"), ABC.eos_id)
    xt = MaskedSequence(Sequence(tokens, 0), (False, True, False, False))
    row = np.zeros((1, len(ABC)))
    row[0, ABC.id("b")] = row[0, ABC.id("x")] = 0.5
    assert denoising_loss(row, x0, xt, 0.25) == pytest.approx(math.log(2))
