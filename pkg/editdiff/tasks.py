"""Synthetic tasks: corpus generators paired with validity oracles.

Every task puts a one-token tag at the start of the prompt, so generated
regions always have a predecessor slot to insert after.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, List, Optional, Set, Tuple

from editdiff.types import ConfigError, Sequence, Vocab
from editdiff.utils import make_rng

logger = logging.getLogger(__name__)

SPLIT_STREAM = 0x73706C6974


class TaskKind(Enum):
    ARITHMETIC = "arithmetic"
    BRACKETS = "brackets"
    KEYED_COPY = "keyed-copy"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of a synthetic task.

    arithmetic: every "a + b = c" with operands in [operand_min, operand_max]
        (or only the listed 'pairs'), each number a single token.
    brackets: every non-empty balanced string of '(' and ')' of at most
        max_len tokens whose nesting depth is at most max_depth.
    keyed-copy: num_sequences sampled prompts holding max_pairs key/value
        pairs followed by a queried key; the target is that key's value of
        value_len tokens.
    """

    kind: TaskKind
    operand_min: int = 0
    operand_max: int = 9
    pairs: Optional[Tuple[Tuple[int, int], ...]] = None
    max_depth: int = 3
    max_len: int = 8
    max_pairs: int = 2
    value_len: int = 2
    num_keys: int = 4
    num_values: int = 4
    num_sequences: int = 200
    seed: int = 0


# The three-sentence corpus where parallel decoding goes wrong
THREE_SUMS = TaskSpec(
    kind=TaskKind.ARITHMETIC,
    operand_min=2,
    operand_max=3,
    pairs=((2, 2), (2, 3), (3, 2)),
)


@dataclass(frozen=True)
class Task:
    """A generated corpus together with the oracle that judges outputs."""

    spec: TaskSpec
    vocab: Vocab
    corpus: Tuple[Sequence, ...]
    oracle: Callable[[Vocab, Sequence], bool]

    def is_valid(self, seq: Sequence) -> bool:
        return self.oracle(self.vocab, seq)


def _complete_region(vocab: Vocab, seq: Sequence) -> Optional[Tuple[str, ...]]:
    """Symbols of a complete generated region without its EOS, else None."""
    region = seq.region
    if not region or region[-1] != vocab.eos_id:
        return None
    body = region[:-1]
    if set(body) & set(vocab.reserved_ids):
        return None
    return vocab.decode(body)


def _as_int(symbol: str) -> Optional[int]:
    return int(symbol) if symbol.lstrip("-").isdigit() else None


def arithmetic_valid(vocab: Vocab, seq: Sequence) -> bool:
    """True iff the region reads "a + b = c" with a + b == c."""
    if vocab.decode(seq.prompt) != ("calc",):
        return False
    body = _complete_region(vocab, seq)
    if body is None or len(body) != 5 or body[1] != "+" or body[3] != "=":
        return False
    a, b, c = (_as_int(body[i]) for i in (0, 2, 4))
    return a is not None and b is not None and c is not None and a + b == c


def bracket_depth(symbols: Tuple[str, ...]) -> Optional[int]:
    """Maximum nesting depth of a balanced bracket string, None if unbalanced."""
    depth = deepest = 0
    for symbol in symbols:
        if symbol == "(":
            depth += 1
            deepest = max(deepest, depth)
        elif symbol == ")":
            depth -= 1
            if depth < 0:
                return None
        else:
            return None
    return deepest if depth == 0 else None


def brackets_validator(max_depth: int) -> Callable[[Vocab, Sequence], bool]:
    def brackets_valid(vocab: Vocab, seq: Sequence) -> bool:
        if vocab.decode(seq.prompt) != ("brackets",):
            return False
        body = _complete_region(vocab, seq)
        if not body:
            return False
        depth = bracket_depth(body)
        return depth is not None and depth <= max_depth

    return brackets_valid


def keyed_copy_validator(value_len: int) -> Callable[[Vocab, Sequence], bool]:
    def keyed_copy_valid(vocab: Vocab, seq: Sequence) -> bool:
        """True iff the region equals the value stored under the queried key."""
        prompt = vocab.decode(seq.prompt)
        body = _complete_region(vocab, seq)
        if body is None or len(prompt) < 3 or prompt[0] != "copy" or prompt[-2] != "?":
            return False
        entries = prompt[1:-2]
        stride = value_len + 1
        for start in range(0, len(entries), stride):
            if entries[start] == prompt[-1]:
                return entries[start + 1 : start + stride] == body
        return False

    return keyed_copy_valid


def balanced_strings(max_len: int, max_depth: int) -> Iterator[str]:
    """All non-empty balanced strings up to max_len, shortest first."""
    for length in range(2, max_len + 1, 2):
        for combo in itertools.product("()", repeat=length):
            depth = bracket_depth(combo)
            if depth is not None and depth <= max_depth:
                yield " ".join(combo)


def _arithmetic(spec: TaskSpec) -> Task:
    if not 0 <= spec.operand_min <= spec.operand_max:
        raise ConfigError(
            f"Empty or negative operand range {spec.operand_min}..{spec.operand_max}"
        )
    numbers = range(spec.operand_min, 2 * spec.operand_max + 1)
    vocab = Vocab.build(["calc", "+", "=", *(str(n) for n in numbers)])
    operands = spec.operand_min, spec.operand_max
    pairs = spec.pairs or tuple(
        itertools.product(range(operands[0], operands[1] + 1), repeat=2)
    )
    for a, b in pairs:
        if not (operands[0] <= a <= operands[1] and operands[0] <= b <= operands[1]):
            raise ConfigError(f"Operand pair {(a, b)} lies outside the operand range")
    corpus = tuple(vocab.sequence(f"{a} + {b} = {a + b}", "calc") for a, b in pairs)
    return Task(spec, vocab, corpus, arithmetic_valid)


def _brackets(spec: TaskSpec) -> Task:
    if spec.max_depth < 1 or spec.max_len < 2:
        raise ConfigError(
            f"Empty bracket language (max_depth={spec.max_depth}, "
            f"max_len={spec.max_len})"
        )
    vocab = Vocab.build(["brackets", "(", ")"])
    corpus = tuple(
        vocab.sequence(target, "brackets")
        for target in balanced_strings(spec.max_len, spec.max_depth)
    )
    return Task(spec, vocab, corpus, brackets_validator(spec.max_depth))


def _keyed_copy(spec: TaskSpec) -> Task:
    if not 1 <= spec.max_pairs <= spec.num_keys:
        raise ConfigError(
            f"Cannot place {spec.max_pairs} pairs with {spec.num_keys} keys"
        )
    if spec.value_len < 1 or spec.num_values < 1 or spec.num_sequences < 1:
        raise ConfigError("keyed-copy needs values and at least one sequence")
    keys = [f"k{i}" for i in range(spec.num_keys)]
    values = [chr(ord("a") + i) for i in range(spec.num_values)]
    vocab = Vocab.build(["copy", "?", *keys, *values])
    rng = make_rng(spec.seed, 0x636F7079)
    seen: Set[Sequence] = set()
    corpus: List[Sequence] = []
    # distinct sequences are capped by the size of the prompt space
    for _ in range(20 * spec.num_sequences):
        if len(corpus) == spec.num_sequences:
            break
        chosen = rng.choice(len(keys), size=spec.max_pairs, replace=False)
        stored = rng.integers(0, len(values), size=(spec.max_pairs, spec.value_len))
        query = int(rng.integers(0, spec.max_pairs))
        prompt = ["copy"]
        for key, value in zip(chosen.tolist(), stored.tolist()):
            prompt += [keys[key], *(values[v] for v in value)]
        prompt += ["?", keys[int(chosen[query])]]
        target = [values[v] for v in stored[query].tolist()]
        seq = vocab.sequence(target, prompt)
        if seq not in seen:
            seen.add(seq)
            corpus.append(seq)
    return Task(spec, vocab, tuple(corpus), keyed_copy_validator(spec.value_len))


def make_task(spec: TaskSpec) -> Task:
    """Generate the corpus and validity oracle of a task."""
    builders = {
        TaskKind.ARITHMETIC: _arithmetic,
        TaskKind.BRACKETS: _brackets,
        TaskKind.KEYED_COPY: _keyed_copy,
    }
    task = builders[spec.kind](spec)
    logger.info(f"Generated {len(task.corpus)} {spec.kind} sequences")
    return task


def split_corpus(
    corpus: Tuple[Sequence, ...], eval_fraction: float, seed: int
) -> Tuple[Tuple[Sequence, ...], Tuple[Sequence, ...]]:
    """Seeded shuffle, then hold out eval_fraction of the corpus (at least one).

    With a single sequence, or eval_fraction == 0, the whole corpus is used
    for both parts.
    """
    if not 0.0 <= eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must lie in [0, 1), got {eval_fraction}")
    if len(corpus) < 2 or eval_fraction == 0.0:
        return corpus, corpus
    order = make_rng(seed, SPLIT_STREAM).permutation(len(corpus)).tolist()
    held_out = min(len(corpus) - 1, max(1, round(eval_fraction * len(corpus))))
    eval_part = tuple(corpus[i] for i in sorted(order[:held_out]))
    train_part = tuple(corpus[i] for i in sorted(order[held_out:]))
    return train_part, eval_part
