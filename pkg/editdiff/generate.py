"""Two-phase generation: parallel unmasking, then edit refinement.

The mask phase starts from a fully masked region and reveals k positions per
step until none are left. The edit phase then applies greedy edit steps to
the complete draft until the model predicts the empty edit, or the edit
budget runs out. Every step is recorded in a GenerationTrace, which can be
written as JSON Lines and replayed.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from editdiff.edits import apply_edits, apply_edits_parallel, greedy_prediction
from editdiff.types import (
    ConfigError,
    DenoiserModel,
    EditDiffError,
    EditPrediction,
    MaskedSequence,
    ModelError,
    Sequence,
    Vocab,
)
from editdiff.utils import argmax_rows, make_rng

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "editdiff.trace"
TRACE_VERSION = 1

MAX_EDIT_ALLOCATION = 32


class SelectionPolicy(Enum):
    """How the mask phase picks which positions to reveal."""

    CONFIDENCE = "confidence"
    RANDOM = "random"

    def __str__(self) -> str:
        return self.value


def allocate_steps(total: int) -> Tuple[int, int]:
    """Split a step budget: a quarter (at most 32) goes to the edit phase."""
    if total < 1:
        raise ConfigError(f"Step budget must be at least 1, got {total}")
    edit = min(total // 4, MAX_EDIT_ALLOCATION)
    return total - edit, edit


@dataclass(frozen=True)
class GenerationConfig:
    """Budget and knobs for one call to generate().

    Leave mask_steps and edit_steps unset to split total_steps with
    allocate_steps(); set both for an explicit allocation. max_edit_steps
    optionally caps the edit phase below its allocation.
    """

    total_steps: int
    mask_steps: Optional[int] = None
    edit_steps: Optional[int] = None
    selection_policy: SelectionPolicy = SelectionPolicy.CONFIDENCE
    l_max: int = 512
    max_edit_steps: Optional[int] = None
    rng_seed: int = 0
    record_timing: bool = False

    def __post_init__(self) -> None:
        if self.l_max < 1:
            raise ConfigError(f"l_max must be positive, got {self.l_max}")
        if self.max_edit_steps is not None and self.max_edit_steps < 0:
            raise ConfigError("max_edit_steps must not be negative")
        if (self.mask_steps is None) != (self.edit_steps is None):
            raise ConfigError("Give both mask_steps and edit_steps, or neither")
        if self.mask_steps is not None and self.edit_steps is not None:
            if self.mask_steps < 0 or self.edit_steps < 0:
                raise ConfigError("Step allocations must not be negative")
            if self.mask_steps + self.edit_steps != self.total_steps:
                raise ConfigError(
                    f"Allocation {self.mask_steps}/{self.edit_steps} does not sum "
                    f"to the budget of {self.total_steps} steps"
                )
        else:
            allocate_steps(self.total_steps)

    @property
    def allocation(self) -> Tuple[int, int]:
        if self.mask_steps is None or self.edit_steps is None:
            return allocate_steps(self.total_steps)
        return self.mask_steps, self.edit_steps

    @property
    def edit_cap(self) -> int:
        edit = self.allocation[1]
        return edit if self.max_edit_steps is None else min(edit, self.max_edit_steps)


@dataclass(frozen=True)
class StepRecord:
    """One step of a generation run, with the state after the step."""

    phase: str
    index: int
    tokens: Tuple[int, ...]
    unmasked: Tuple[int, ...] = ()
    prediction: Optional[EditPrediction] = None
    replacements: int = 0
    deletions: int = 0
    insertions: int = 0
    empty: bool = False
    truncated: bool = False
    duration_ns: int = field(default=0, compare=False)


@dataclass
class GenerationTrace:
    """Everything that happened during one generate() call."""

    prompt_len: int
    initial: Tuple[int, ...]
    mask_steps: int = 0
    edit_steps: int = 0
    steps: List[StepRecord] = field(default_factory=list)

    @property
    def final(self) -> Sequence:
        tokens = self.steps[-1].tokens if self.steps else self.initial
        return Sequence(tokens, self.prompt_len)

    @property
    def empty_edit_step(self) -> Optional[int]:
        """Index (within the edit phase) of the first empty edit, if any."""
        for record in self.steps:
            if record.phase == "edit" and record.empty:
                return record.index
        return None

    @property
    def edit_steps_used(self) -> int:
        return sum(1 for r in self.steps if r.phase == "edit" and not r.empty)

    @property
    def truncated(self) -> bool:
        return any(r.truncated for r in self.steps)

    def durations_ns(self, phase: str) -> List[int]:
        return [r.duration_ns for r in self.steps if r.phase == phase]


def unmask_schedule(gen_len: int, mask_steps: int) -> List[int]:
    """Positions to reveal per step; earlier steps take the remainder."""
    if mask_steps <= 0 or gen_len == 0:
        return []
    steps = min(mask_steps, gen_len)
    base, remainder = divmod(gen_len, steps)
    return [base + 1] * remainder + [base] * (steps - remainder)


def _select(
    rows: np.ndarray, k: int, policy: SelectionPolicy, rng: np.random.Generator
) -> np.ndarray:
    """Indices (into the masked positions) of the k positions to reveal."""
    if policy is SelectionPolicy.CONFIDENCE:
        order = np.argsort(-rows.max(axis=1), kind="stable")
        return np.sort(order[:k])
    return np.sort(rng.choice(len(rows), size=k, replace=False))


def unmask_step(
    model: DenoiserModel,
    x: Sequence,
    k: int,
    policy: SelectionPolicy,
    rng: np.random.Generator,
) -> Tuple[Sequence, Tuple[int, ...]]:
    """Reveal min(k, #masked) masked positions of 'x' with their argmax token.

    Return the new sequence and the revealed (absolute) positions.
    """
    vocab = model.vocab
    flags = tuple(t == vocab.mask_id for t in x.region)
    xt = MaskedSequence(x, flags)
    positions = xt.masked_positions
    if not positions:
        return x, ()
    rows = model.predict_unmask(xt)
    if rows.shape != (len(positions), len(vocab)):
        raise ModelError(
            f"Unmask head returned {rows.shape}, expected {(len(positions), len(vocab))}"
        )
    chosen = _select(rows, min(k, len(positions)), policy, rng)
    fill = argmax_rows(rows[chosen])
    revealed = tuple(positions[i] for i in chosen.tolist())
    tokens = list(x.tokens)
    for pos, token in zip(revealed, fill.tolist()):
        tokens[pos] = token
    return Sequence(tokens, x.prompt_len), revealed


def mask_phase(
    model: DenoiserModel,
    prompt: Tuple[int, ...],
    gen_len: int,
    mask_steps: int,
    policy: SelectionPolicy = SelectionPolicy.CONFIDENCE,
    seed: int = 0,
    trace: Optional[GenerationTrace] = None,
) -> Sequence:
    """Fill a fully masked region of gen_len tokens in mask_steps steps."""
    rng = make_rng(seed, 1)
    x = Sequence(tuple(prompt) + (model.vocab.mask_id,) * gen_len, len(prompt))
    for index, k in enumerate(unmask_schedule(gen_len, mask_steps)):
        started = time.perf_counter_ns()
        x, revealed = unmask_step(model, x, k, policy, rng)
        logger.debug(f"Mask step {index}: revealed {revealed}")
        if trace is not None:
            trace.steps.append(
                StepRecord(
                    phase="mask",
                    index=index,
                    tokens=x.tokens,
                    unmasked=revealed,
                    duration_ns=time.perf_counter_ns() - started,
                )
            )
    return x


def edit_phase(
    model: DenoiserModel,
    draft: Sequence,
    max_edit_steps: int,
    l_max: Optional[int] = None,
    trace: Optional[GenerationTrace] = None,
) -> Tuple[Sequence, int]:
    """Refine 'draft' until an empty edit is predicted or the cap is reached.

    Return the refined sequence and the number of steps taken before the
    first empty prediction.
    """
    x = draft
    used = 0
    for index in range(max_edit_steps):
        started = time.perf_counter_ns()
        prediction = greedy_prediction(model, x)
        outcome = apply_edits_parallel(x, prediction, model.vocab, l_max)
        if trace is not None:
            trace.steps.append(
                StepRecord(
                    phase="edit",
                    index=index,
                    tokens=outcome.result.tokens,
                    prediction=prediction,
                    replacements=outcome.replacements,
                    deletions=outcome.deletions,
                    insertions=outcome.insertions,
                    empty=outcome.was_empty,
                    truncated=outcome.truncated,
                    duration_ns=time.perf_counter_ns() - started,
                )
            )
        if outcome.was_empty:
            logger.debug(f"Empty edit predicted at edit step {index}")
            break
        x = outcome.result
        used += 1
    return x, used


def generate(
    model: DenoiserModel,
    prompt: Tuple[int, ...],
    gen_len: int,
    cfg: GenerationConfig,
) -> Tuple[Sequence, GenerationTrace]:
    """Draft with the mask phase, then refine with the edit phase."""
    if gen_len > cfg.l_max:
        raise ConfigError(f"Generation length {gen_len} exceeds l_max={cfg.l_max}")
    mask_steps, edit_steps = cfg.allocation
    vocab = model.vocab
    trace = GenerationTrace(
        prompt_len=len(prompt),
        initial=tuple(prompt) + (vocab.mask_id,) * gen_len,
        mask_steps=mask_steps,
        edit_steps=edit_steps,
    )
    draft = mask_phase(
        model,
        prompt,
        gen_len,
        mask_steps,
        cfg.selection_policy,
        cfg.rng_seed,
        trace,
    )
    result, used = edit_phase(model, draft, cfg.edit_cap, cfg.l_max, trace)
    logger.info(
        f"Generated {vocab.render(result)!r} "
        f"({mask_steps} mask steps, {used} edit steps used)"
    )
    return result, trace


class TraceReplayError(EditDiffError):
    """A recorded trace does not reproduce its own transitions."""


def replay_trace(trace: GenerationTrace, vocab: Vocab) -> Sequence:
    """Re-derive every recorded transition and return the final sequence.

    Mask steps must reveal exactly the recorded positions (and nothing else);
    edit steps must reproduce their recorded state when the recorded
    prediction is applied again.
    """
    state = Sequence(trace.initial, trace.prompt_len)
    mask_id = vocab.mask_id
    for record in trace.steps:
        if record.phase == "mask":
            changed = tuple(
                i for i, (a, b) in enumerate(zip(state.tokens, record.tokens)) if a != b
            )
            if len(record.tokens) != len(state) or changed != record.unmasked:
                raise TraceReplayError(f"Mask step {record.index} changed {changed}")
            if any(state.tokens[i] != mask_id for i in changed):
                raise TraceReplayError(f"Mask step {record.index} re-masked a token")
            state = Sequence(record.tokens, state.prompt_len)
            continue
        if record.prediction is None:
            raise TraceReplayError(f"Edit step {record.index} has no prediction")
        outcome = apply_edits(state, record.prediction, vocab)
        tokens = outcome.result.tokens
        if record.truncated:
            tokens = tokens[: len(record.tokens) - 1] + (vocab.eos_id,)
        if tokens != record.tokens or outcome.was_empty != record.empty:
            raise TraceReplayError(f"Edit step {record.index} does not replay")
        if not record.empty:
            state = Sequence(record.tokens, state.prompt_len)
    return state


def trace_lines(
    trace: GenerationTrace, vocab: Vocab, record_timing: bool = False
) -> Iterator[str]:
    """Serialize a trace as JSON Lines: header, one line per step, footer."""
    yield json.dumps(
        {
            "schema": TRACE_SCHEMA,
            "version": TRACE_VERSION,
            "prompt_len": trace.prompt_len,
            "mask_steps": trace.mask_steps,
            "edit_steps": trace.edit_steps,
            "initial": list(vocab.decode(trace.initial)),
        }
    )
    for record in trace.steps:
        line = {
            "phase": record.phase,
            "index": record.index,
            "tokens": list(vocab.decode(record.tokens)),
            "unmasked": list(record.unmasked),
            "replacements": record.replacements,
            "deletions": record.deletions,
            "insertions": record.insertions,
            "empty": record.empty,
            "truncated": record.truncated,
        }
        if record.prediction is not None:
            line["c"] = list(vocab.decode(record.prediction.c))
            line["n"] = list(vocab.decode(record.prediction.n))
        if record_timing:
            line["duration_ns"] = record.duration_ns
        yield json.dumps(line)
    yield json.dumps(
        {
            "final": list(vocab.decode(trace.final.tokens)),
            "empty_edit_step": trace.empty_edit_step,
            "edit_steps_used": trace.edit_steps_used,
        }
    )


def write_trace(
    path: Path, trace: GenerationTrace, vocab: Vocab, record_timing: bool = False
) -> None:
    lines = trace_lines(trace, vocab, record_timing)
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    logger.info(f"Wrote generation trace to {path}")


def parse_trace(lines: List[str], vocab: Vocab) -> GenerationTrace:
    """Rebuild a trace from the JSON Lines written by trace_lines()."""
    try:
        records = [json.loads(line) for line in lines if line.strip()]
    except ValueError as exc:
        raise TraceReplayError(f"Malformed trace line: {exc}") from exc
    if len(records) < 2:
        raise TraceReplayError("Trace needs at least a header and a footer")
    header = records[0]
    if header.get("schema") != TRACE_SCHEMA or header.get("version") != TRACE_VERSION:
        raise TraceReplayError(
            f"Unsupported trace schema {header.get('schema')!r} "
            f"version {header.get('version')!r}"
        )
    trace = GenerationTrace(
        prompt_len=header["prompt_len"],
        initial=vocab.encode(header["initial"]),
        mask_steps=header["mask_steps"],
        edit_steps=header["edit_steps"],
    )
    for line in records[1:-1]:
        prediction = None
        if "c" in line:
            prediction = EditPrediction(vocab.encode(line["c"]), vocab.encode(line["n"]))
        trace.steps.append(
            StepRecord(
                phase=line["phase"],
                index=line["index"],
                tokens=vocab.encode(line["tokens"]),
                unmasked=tuple(line["unmasked"]),
                prediction=prediction,
                replacements=line["replacements"],
                deletions=line["deletions"],
                insertions=line["insertions"],
                empty=line["empty"],
                truncated=line["truncated"],
                duration_ns=line.get("duration_ns", 0),
            )
        )
    return trace
