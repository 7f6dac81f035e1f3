"""Common types used across editdiff."""

from dataclasses import dataclass, field
from typing import (
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Protocol,
    Sequence as Seq,
    Tuple,
    Union,
)

import numpy as np

MASK_SYMBOL = "<mask>"
DEL_SYMBOL = "<del>"
EOS_SYMBOL = "<eos>"
PAD_SYMBOL = "<pad>"
RESERVED_SYMBOLS = (MASK_SYMBOL, DEL_SYMBOL, EOS_SYMBOL, PAD_SYMBOL)


class EditDiffError(Exception):
    """Base class for errors raised by editdiff."""

    def __init__(self, msg: str):
        super().__init__(msg)
        self.msg = msg


class VocabError(EditDiffError):
    """Vocabulary is malformed, or a symbol/id is unknown."""


class CorpusError(EditDiffError):
    """Corpus file or corpus contents cannot be used."""


class CorruptionError(EditDiffError):
    """Invalid input to the forward corruption process or the denoising loss."""


class EditError(EditDiffError):
    """Edit predictions that cannot be applied to the given sequence."""


class SupervisionError(EditDiffError):
    """Edit scripts or edit targets that cannot be built."""


class ModelError(EditDiffError):
    """A model produced or was given data of the wrong shape."""


class CheckpointError(ModelError):
    """A checkpoint file has the wrong format or version."""


class UntrainedModelError(ModelError):
    """Refuse to evaluate a model that has never been updated."""


class TrainingError(EditDiffError):
    """Training diverged or was misconfigured."""


class ConfigError(EditDiffError):
    """Configuration (file, flags or derived values) is invalid."""


@dataclass(frozen=True)
class Vocab:
    """Ordered, closed vocabulary with the four reserved sentinels at the end.

    Token ids are dense: symbol i has id i. Use Vocab.build() to construct a
    vocabulary from corpus symbols; it appends the sentinels exactly once.
    """

    symbols: Tuple[str, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: Dict[str, int] = {}
        for i, symbol in enumerate(self.symbols):
            if not symbol or any(ch.isspace() for ch in symbol):
                raise VocabError(f"Invalid symbol {symbol!r} at id {i}")
            if symbol in index:
                raise VocabError(f"Duplicate symbol {symbol!r} in vocabulary")
            index[symbol] = i
        for reserved in RESERVED_SYMBOLS:
            if reserved not in index:
                raise VocabError(f"Reserved symbol {reserved!r} is missing")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, symbols: Iterable[str]) -> "Vocab":
        """Create a vocabulary from corpus symbols, appending the sentinels."""
        ordered: List[str] = []
        for symbol in symbols:
            if symbol in RESERVED_SYMBOLS:
                raise VocabError(f"Corpus symbol {symbol!r} clashes with a sentinel")
            if symbol not in ordered:
                ordered.append(symbol)
        return cls(tuple(ordered) + RESERVED_SYMBOLS)

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: object) -> bool:
        return symbol in self._index

    @property
    def mask_id(self) -> int:
        return self._index[MASK_SYMBOL]

    @property
    def del_id(self) -> int:
        return self._index[DEL_SYMBOL]

    @property
    def eos_id(self) -> int:
        return self._index[EOS_SYMBOL]

    @property
    def pad_id(self) -> int:
        return self._index[PAD_SYMBOL]

    @property
    def reserved_ids(self) -> Tuple[int, int, int, int]:
        return (self.mask_id, self.del_id, self.eos_id, self.pad_id)

    @property
    def content_ids(self) -> Tuple[int, ...]:
        """Ids of the ordinary (non-sentinel) symbols."""
        reserved = set(self.reserved_ids)
        return tuple(i for i in range(len(self)) if i not in reserved)

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise VocabError(f"Unknown symbol {symbol!r}") from None

    def symbol(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.symbols):
            raise VocabError(f"Token id {token_id} outside 0..{len(self) - 1}")
        return self.symbols[token_id]

    def encode(self, symbols: Iterable[str]) -> Tuple[int, ...]:
        return tuple(self.id(s) for s in symbols)

    def decode(self, token_ids: Iterable[int]) -> Tuple[str, ...]:
        return tuple(self.symbol(i) for i in token_ids)

    def sequence(
        self, target: Union[str, Seq[str]], prompt: Union[str, Seq[str]] = ()
    ) -> "Sequence":
        """Build a complete Sequence, appending EOS to the target region."""
        if isinstance(prompt, str):
            prompt = prompt.split()
        if isinstance(target, str):
            target = target.split()
        tokens = self.encode(prompt) + self.encode(target) + (self.eos_id,)
        return Sequence(tokens, len(prompt))

    def render(self, seq: "Sequence", eos: bool = False) -> str:
        """Human-readable rendering, prompt and region separated by ' | '."""
        region = [self.symbol(t) for t in seq.region]
        if not eos and region and region[-1] == EOS_SYMBOL:
            region = region[:-1]
        prompt = " ".join(self.decode(seq.prompt))
        return f"{prompt} | {' '.join(region)}" if prompt else " ".join(region)

    def check(self, seq: "Sequence", *, complete: bool = False) -> None:
        """Verify the vocabulary-dependent invariants of a Sequence.

        With complete=True the generated region must also be free of MASK and
        DEL and end with exactly one EOS.
        """
        for token in seq.tokens:
            if not 0 <= token < len(self):
                raise VocabError(f"Token id {token} outside 0..{len(self) - 1}")
        if self.pad_id in seq.tokens:
            raise VocabError("PAD inside the live region")
        if {self.mask_id, self.del_id}.intersection(seq.prompt):
            raise VocabError("Prompt region contains MASK or DEL")
        if complete:
            region = seq.region
            if {self.mask_id, self.del_id}.intersection(region):
                raise VocabError("Complete sequence contains MASK or DEL")
            if not region or region[-1] != self.eos_id:
                raise VocabError("Generated region does not end with EOS")
            if region.count(self.eos_id) != 1:
                raise VocabError("Generated region holds more than one EOS")


@dataclass(frozen=True, order=True)
class Sequence:
    """A token sequence: a frozen prompt prefix followed by an editable region."""

    tokens: Tuple[int, ...]
    prompt_len: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise VocabError(
                f"prompt_len {self.prompt_len} outside 0..{len(self.tokens)}"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[int]:
        return iter(self.tokens)

    @property
    def prompt(self) -> Tuple[int, ...]:
        return self.tokens[: self.prompt_len]

    @property
    def region(self) -> Tuple[int, ...]:
        """The generated (editable) region."""
        return self.tokens[self.prompt_len :]

    def with_region(self, region: Iterable[int]) -> "Sequence":
        return Sequence(self.prompt + tuple(region), self.prompt_len)


@dataclass(frozen=True)
class CorruptionConfig:
    """Noise level and seed for one application of the forward process."""

    noise_level: float
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.noise_level <= 1.0:
            raise CorruptionError(
                f"Noise level must lie in (0, 1], got {self.noise_level}"
            )


@dataclass(frozen=True)
class MaskedSequence:
    """A corrupted sequence: 'base' carries MASK wherever 'masked' is set.

    'masked' has one flag per generated-region position; prompt positions are
    never masked.
    """

    base: Sequence
    masked: Tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.masked) != len(self.base.region):
            raise CorruptionError(
                f"{len(self.masked)} mask flags for a region of "
                f"{len(self.base.region)} positions"
            )

    @property
    def tokens(self) -> Tuple[int, ...]:
        return self.base.tokens

    @property
    def prompt_len(self) -> int:
        return self.base.prompt_len

    @property
    def masked_positions(self) -> Tuple[int, ...]:
        """Absolute positions of masked tokens, in increasing order."""
        offset = self.base.prompt_len
        return tuple(offset + i for i, flag in enumerate(self.masked) if flag)


@dataclass(frozen=True)
class EditPrediction:
    """Per-position edit pair: c (replacement or DEL) and n (next candidate)."""

    c: Tuple[int, ...]
    n: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "c", tuple(int(t) for t in self.c))
        object.__setattr__(self, "n", tuple(int(t) for t in self.n))

    @classmethod
    def identity(cls, x: Sequence) -> "EditPrediction":
        """The empty edit: keep every token, never insert."""
        tokens = x.tokens
        return cls(tokens, tokens[1:] + tokens[-1:])


@dataclass(frozen=True)
class EditOutcome:
    """Result of applying an EditPrediction to a sequence.

    The counts describe the untruncated application, so that
    len(result.region) == len(x.region) - deletions + insertions holds for
    every outcome except a truncated one, whose region is cut to l_max.
    """

    result: Sequence
    replacements: int = 0
    deletions: int = 0
    insertions: int = 0
    was_empty: bool = False
    truncated: bool = False


@dataclass(frozen=True, order=True)
class Replace:
    pos: int
    token: int


@dataclass(frozen=True, order=True)
class Delete:
    pos: int


@dataclass(frozen=True, order=True)
class Insert:
    after_pos: int
    token: int


EditOp = Union[Replace, Delete, Insert]


def op_sort_key(op: EditOp) -> Tuple[int, int]:
    """Canonical order: by source position, ops at a position before inserts after it."""
    if isinstance(op, Insert):
        return (op.after_pos, 1)
    return (op.pos, 0)


@dataclass(frozen=True)
class EditScript:
    """Ordered replace/delete/insert operations indexed against a source."""

    ops: Tuple[EditOp, ...] = ()

    @property
    def distance(self) -> int:
        return len(self.ops)

    def __len__(self) -> int:
        return len(self.ops)


@dataclass(frozen=True)
class EditTargets:
    """Token-wise supervision derived from a canonical edit script.

    n_star holds None at slots whose candidate never takes effect (prompt
    interior, predecessor of a deleted position, the final slot); those slots
    are also False in loss_mask. 'deferred' counts insertions left for later
    steps (including insertions no single step can realize).
    """

    c_star: Tuple[int, ...]
    n_star: Tuple[Optional[int], ...]
    loss_mask: Tuple[bool, ...]
    deferred: int = 0

    def as_prediction(self) -> EditPrediction:
        """Turn targets into a concrete prediction, filling inactive n slots."""
        n = []
        for i, cand in enumerate(self.n_star):
            if cand is not None:
                n.append(cand)
            elif i + 1 < len(self.c_star):
                n.append(self.c_star[i + 1])  # never read by the operator
            else:
                n.append(self.c_star[i])
        return EditPrediction(self.c_star, tuple(n))


class DenoiserModel(Protocol):
    """What the scheduler and the training loop need from a model.

    predict_unmask() returns one probability row over the vocabulary per
    masked position of 'xt' (in position order). predict_edits() returns two
    (len(x), len(vocab)) arrays: the c-head (vocabulary plus DEL) and the
    n-head (next/insertion candidate). Every row sums to 1.
    """

    @property
    def vocab(self) -> Vocab:
        ...

    def predict_unmask(self, xt: MaskedSequence) -> np.ndarray:
        ...

    def predict_edits(self, x: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        ...
