"""Apply token-wise edit predictions to a sequence.

Every position j carries a pair (c_j, m_j): c_j is the refined token (or DEL)
and m_j = n_{j-1} is the insertion candidate inherited from the original
predecessor. Inside the prompt, and at position 0 of a prompt-less sequence,
m_j is inactive. Pairs with c_j = DEL are dropped entirely; every surviving
pair emits m_j (only when it differs from c_j) followed by c_j.

apply_edits() is the readable reference; apply_edits_parallel() computes the
same thing with whole-array operations (shift, mask, interleave).
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from editdiff.types import (
    DenoiserModel,
    EditError,
    EditOutcome,
    EditPrediction,
    ModelError,
    Sequence,
    Vocab,
)
from editdiff.utils import argmax_rows

logger = logging.getLogger(__name__)


def inherited_candidates(x: Sequence, e: EditPrediction) -> List[Optional[int]]:
    """Return m_j for every position j, or None where the candidate is inactive."""
    return [
        None if j < x.prompt_len or j == 0 else e.n[j - 1] for j in range(len(x))
    ]


def validate_prediction(x: Sequence, e: EditPrediction, vocab: Vocab) -> None:
    """Raise EditError unless 'e' can be applied to 'x'."""
    if not len(e.c) == len(e.n) == len(x):
        raise EditError(
            f"Edit prediction sized ({len(e.c)}, {len(e.n)}) for a sequence of "
            f"length {len(x)}"
        )
    size = len(vocab)
    if any(not 0 <= t < size for t in e.c + e.n):
        raise EditError("Edit prediction holds token ids outside the vocabulary")
    for i in range(x.prompt_len):
        if e.c[i] == vocab.del_id:
            raise EditError(f"Prediction deletes prompt position {i}")
        if e.c[i] != x.tokens[i]:
            raise EditError(f"Prediction rewrites prompt position {i}")
    if {vocab.mask_id, vocab.pad_id}.intersection(e.c):
        raise EditError("Replacement tokens may not be MASK or PAD")
    forbidden = {vocab.mask_id, vocab.del_id, vocab.pad_id}
    for j, cand in enumerate(inherited_candidates(x, e)):
        if cand is not None and cand != e.c[j] and cand in forbidden:
            raise EditError(f"Insertion candidate before position {j} is a sentinel")


def _finish(
    x: Sequence,
    tokens: List[int],
    counts: Tuple[int, int, int],
    vocab: Vocab,
    l_max: Optional[int],
) -> EditOutcome:
    replacements, deletions, insertions = counts
    truncated = False
    region = tokens[x.prompt_len :]
    if l_max is not None and len(region) > l_max:
        logger.warning(f"Edit output of {len(region)} tokens truncated at {l_max}")
        region = region[: l_max - 1] + [vocab.eos_id]
        tokens = tokens[: x.prompt_len] + region
        truncated = True
    result = Sequence(tokens, x.prompt_len)
    return EditOutcome(
        result=result,
        replacements=replacements,
        deletions=deletions,
        insertions=insertions,
        was_empty=result.tokens == x.tokens,
        truncated=truncated,
    )


def apply_edits(
    x: Sequence, e: EditPrediction, vocab: Vocab, l_max: Optional[int] = None
) -> EditOutcome:
    """Apply 'e' to 'x' in a single left-to-right pass (reference semantics)."""
    validate_prediction(x, e, vocab)
    out: List[int] = []
    replacements = deletions = insertions = 0
    for j, cand in enumerate(inherited_candidates(x, e)):
        c_j = e.c[j]
        if c_j == vocab.del_id:
            deletions += 1
            continue
        if cand is not None and cand != c_j:
            out.append(cand)
            insertions += 1
        out.append(c_j)
        if c_j != x.tokens[j]:
            replacements += 1
    return _finish(x, out, (replacements, deletions, insertions), vocab, l_max)


def apply_edits_parallel(
    x: Sequence, e: EditPrediction, vocab: Vocab, l_max: Optional[int] = None
) -> EditOutcome:
    """Apply 'e' to 'x' with whole-array operations.

    Same contract and output as apply_edits().
    """
    validate_prediction(x, e, vocab)
    tokens = np.asarray(x.tokens, dtype=np.int64)
    curr = np.asarray(e.c, dtype=np.int64)
    cand = np.roll(np.asarray(e.n, dtype=np.int64), 1)
    cand[: x.prompt_len] = tokens[: x.prompt_len]
    if x.prompt_len == 0 and len(cand):
        cand[0] = curr[0]  # wraparound slot

    keep = curr != vocab.del_id
    curr, cand = curr[keep], cand[keep]

    insert = curr != cand
    interleaved = np.stack([cand, curr], axis=1).reshape(-1)
    emit = np.stack([insert, np.ones_like(insert)], axis=1).reshape(-1)
    out = interleaved[emit]

    counts = (
        int(np.count_nonzero(keep & (np.asarray(e.c) != tokens))),
        int(np.count_nonzero(~keep)),
        int(np.count_nonzero(insert)),
    )
    return _finish(x, out.tolist(), counts, vocab, l_max)


def is_empty_edit(x: Sequence, e: EditPrediction, vocab: Vocab) -> bool:
    """Return True iff 'e' changes nothing: no replacement, deletion or insertion."""
    validate_prediction(x, e, vocab)
    if e.c != x.tokens:
        return False
    return all(
        cand is None or cand == e.c[j]
        for j, cand in enumerate(inherited_candidates(x, e))
    )


def greedy_prediction(model: DenoiserModel, x: Sequence) -> EditPrediction:
    """Take the per-position argmax of both edit heads, prompt kept as is."""
    c_probs, n_probs = model.predict_edits(x)
    expected = (len(x), len(model.vocab))
    if c_probs.shape != expected or n_probs.shape != expected:
        raise ModelError(
            f"Edit heads returned {c_probs.shape} and {n_probs.shape}, "
            f"expected {expected}"
        )
    c = argmax_rows(c_probs)
    c[: x.prompt_len] = x.prompt
    return EditPrediction(tuple(c.tolist()), tuple(argmax_rows(n_probs).tolist()))


def greedy_edit_step(
    model: DenoiserModel, x: Sequence, l_max: Optional[int] = None
) -> Tuple[EditOutcome, bool]:
    """Run one refinement step; the second value is True on an empty edit."""
    outcome = apply_edits_parallel(x, greedy_prediction(model, x), model.vocab, l_max)
    logger.debug(
        f"Edit step: {outcome.replacements} replaced, {outcome.deletions} deleted, "
        f"{outcome.insertions} inserted"
    )
    return outcome, outcome.was_empty
