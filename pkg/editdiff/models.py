"""Denoiser models: an exact tabular model and a small trainable one.

Both implement the DenoiserModel protocol: an unmask head giving one row per
masked position, and two edit heads (c: token or DEL, n: next/insertion
candidate) giving one row per position. Every row is a float64 probability
vector over the whole vocabulary; tokens outside a head's codomain get 0.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from editdiff.edit_scripts import (
    minimal_edit_script,
    nearest_references,
    script_to_targets,
)
from editdiff.types import (
    CheckpointError,
    CorpusError,
    EditTargets,
    MaskedSequence,
    ModelError,
    Sequence,
    TrainingError,
    Vocab,
)
from editdiff.utils import check_rows_normalized, make_rng

logger = logging.getLogger(__name__)

UNMASK_HEAD = 0
C_HEAD = 1
N_HEAD = 2
NUM_HEADS = 3

CHECKPOINT_FORMAT = "editdiff.featurized"
CHECKPOINT_VERSION = 2

EDIT_CACHE_SIZE = 4096


def head_codomain(vocab: Vocab, head: int) -> np.ndarray:
    """Boolean mask of the token ids the given head may put mass on."""
    allowed = np.ones(len(vocab), dtype=bool)
    allowed[[vocab.mask_id, vocab.pad_id]] = False
    if head != C_HEAD:
        allowed[vocab.del_id] = False
    return allowed


def inactive_fill(x: Sequence, slot: int, vocab: Vocab) -> int:
    """Stand-in n target for a slot whose candidate the operator discards."""
    if slot + 1 < len(x):
        nxt = x.tokens[slot + 1]
        if nxt not in (vocab.mask_id, vocab.del_id, vocab.pad_id):
            return nxt
    return vocab.eos_id


def _frequency_rows(columns: Seq[Seq[int]], width: int) -> np.ndarray:
    """One row per column of token ids: the empirical distribution over ids."""
    rows = np.zeros((len(columns), width), dtype=np.float64)
    for i, column in enumerate(columns):
        np.add.at(rows[i], np.asarray(column, dtype=np.int64), 1.0)
        rows[i] /= len(column)
    return rows


class TabularModel:
    """Exact conditionals over a closed corpus, computed by enumeration.

    The unmask head is the posterior over corpus sequences of the same length
    that agree with every unmasked token of the input. The edit heads are the
    action frequencies of the canonical edit targets towards the nearest
    corpus sequences (see nearest_references()); rows are memoized per draft
    in a bounded cache.
    """

    def __init__(self, vocab: Vocab, corpus: Seq[Sequence]):
        self._vocab = vocab
        self.corpus = tuple(corpus)
        grouped: Dict[int, List[Tuple[int, ...]]] = {}
        for seq in self.corpus:
            grouped.setdefault(len(seq), []).append(seq.tokens)
        self._by_length = {
            length: np.asarray(rows, dtype=np.int64) for length, rows in grouped.items()
        }
        self._edit_rows = lru_cache(maxsize=EDIT_CACHE_SIZE)(self._compute_edit_rows)

    @property
    def vocab(self) -> Vocab:
        return self._vocab

    def _uniform_rows(self, count: int) -> np.ndarray:
        allowed = head_codomain(self.vocab, UNMASK_HEAD)
        rows = np.zeros((count, len(self.vocab)), dtype=np.float64)
        rows[:, allowed] = 1.0 / allowed.sum()
        return rows

    def predict_unmask(self, xt: MaskedSequence) -> np.ndarray:
        positions = list(xt.masked_positions)
        if not positions:
            return np.zeros((0, len(self.vocab)), dtype=np.float64)
        table = self._by_length.get(len(xt.tokens))
        if table is None:
            logger.warning(
                f"No corpus sequence of length {len(xt.tokens)}: uniform unmask rows"
            )
            return self._uniform_rows(len(positions))

        tokens = np.asarray(xt.tokens, dtype=np.int64)
        visible = tokens != self.vocab.mask_id
        consistent = table[np.all(table[:, visible] == tokens[visible], axis=1)]
        if len(consistent) == 0:
            logger.warning(
                "No corpus sequence agrees with the unmasked tokens: "
                "backing off to positional marginals"
            )
            consistent = table
        return _frequency_rows(consistent[:, positions].T.tolist(), len(self.vocab))

    def _compute_edit_rows(self, x: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        nearest = nearest_references(x, self.corpus)
        if not nearest:
            raise ModelError(f"No corpus sequence has the prompt {x.prompt}")
        targets: List[EditTargets] = [
            script_to_targets(x, minimal_edit_script(x, y), self.vocab) for y in nearest
        ]
        c_columns = [[t.c_star[i] for t in targets] for i in range(len(x))]
        n_columns = [
            [
                inactive_fill(x, i, self.vocab) if cand is None else cand
                for cand in (t.n_star[i] for t in targets)
            ]
            for i in range(len(x))
        ]
        return (
            _frequency_rows(c_columns, len(self.vocab)),
            _frequency_rows(n_columns, len(self.vocab)),
        )

    def predict_edits(self, x: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        c_rows, n_rows = self._edit_rows(x)
        return c_rows.copy(), n_rows.copy()


def fit_tabular(corpus: Seq[Sequence], vocab: Vocab) -> TabularModel:
    """Build the exact tabular model of a closed corpus."""
    if not corpus:
        raise CorpusError("Cannot fit a model to an empty corpus")
    prompt_lengths = {seq.prompt_len for seq in corpus}
    if len(prompt_lengths) != 1:
        raise CorpusError(f"Corpus mixes prompt lengths {sorted(prompt_lengths)}")
    for seq in corpus:
        vocab.check(seq, complete=True)
    logger.info(f"Fitted tabular model on {len(corpus)} sequences")
    return TabularModel(vocab, corpus)


@dataclass(frozen=True)
class HeadExample:
    """Supervised rows for one input state of one head.

    Row r asks head 'head', reading 'tokens' (prompt_len is irrelevant to the
    features), to put mass on targets[r] at positions[r]; every row of this
    example contributes with the same 'weight'. When 'soft_targets' is given,
    row r is fitted to the distribution soft_targets[r] instead, and targets
    only serve for reporting. 'kind' labels the loss for reporting.
    """

    tokens: Tuple[int, ...]
    head: int
    positions: Tuple[int, ...]
    targets: Tuple[int, ...]
    weight: float = 1.0
    kind: str = "mask"
    soft_targets: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self) -> None:
        if len(self.positions) != len(self.targets):
            raise ModelError("Head example positions and targets differ in length")
        if self.soft_targets is not None and len(self.soft_targets) != len(
            self.positions
        ):
            raise ModelError("Head example positions and soft targets differ in length")


Batch = List[HeadExample]


class Optimizer(Enum):
    ADAM = "adam"
    SGD = "sgd"

    def __str__(self) -> str:
        return self.value


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class FeaturizedConfig:
    window_radius: int = 4
    max_positions: int = 32
    init_scale: float = 0.01
    seed: int = 0
    pair_features: bool = True

    def __post_init__(self) -> None:
        if self.window_radius < 0 or self.max_positions < 1:
            raise ModelError(f"Invalid model configuration {self}")


PARAM_NAMES = ("bias", "pos", "tok", "pair")


def window_pairs(config: FeaturizedConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Column indices (first, second) of every unordered pair of window offsets."""
    if not config.pair_features:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    first, second = np.triu_indices(2 * config.window_radius + 1, k=1)
    return first.astype(np.int64), second.astype(np.int64)


def param_shapes(
    vocab_size: int, config: FeaturizedConfig
) -> Dict[str, Tuple[int, ...]]:
    width = 2 * config.window_radius + 1
    pairs = len(window_pairs(config)[0])
    return {
        "bias": (NUM_HEADS, vocab_size),
        "pos": (NUM_HEADS, config.max_positions, vocab_size),
        "tok": (NUM_HEADS, width, vocab_size, vocab_size),
        "pair": (NUM_HEADS, pairs, vocab_size, vocab_size, vocab_size),
    }


@dataclass(frozen=True)
class Features:
    """Feature indices of one input: clipped positions (L,) and window tokens."""

    positions: np.ndarray
    window: np.ndarray  # (L, 2r+1), PAD outside the sequence
    first: np.ndarray  # (L, P) token at the first offset of each window pair
    second: np.ndarray  # (L, P)


@dataclass(frozen=True)
class FeaturizedModel:
    """Log-linear heads over position, window-token and window-pair features.

    The logits of head h at position i sum a bias row, a row for the clipped
    absolute position of i, one row per window offset d in [-r, r] chosen by
    the token at i + d (PAD outside the sequence), and one row per pair of
    offsets chosen by both tokens. The pair rows let a head react to two
    context tokens jointly (e.g. both operands of a sum). One parameter set
    serves all three heads.
    """

    vocab: Vocab
    config: FeaturizedConfig
    params: Dict[str, np.ndarray] = field(repr=False, compare=False)
    updates: int = 0
    opt_state: Optional[Dict[str, np.ndarray]] = field(
        default=None, repr=False, compare=False
    )

    @classmethod
    def initialize(cls, vocab: Vocab, config: FeaturizedConfig) -> "FeaturizedModel":
        rng = make_rng(config.seed, 0x6D6F64656C)
        shapes = param_shapes(len(vocab), config)
        params = {
            name: rng.normal(0.0, config.init_scale, shapes[name])
            for name in ("bias", "pos", "tok")
        }
        params["pair"] = np.zeros(shapes["pair"])  # pair rows start neutral
        params = {name: params[name] for name in PARAM_NAMES}
        logger.info(
            f"Initialized featurized model with {sum(p.size for p in params.values())} "
            "parameters"
        )
        return cls(vocab, config, params)

    @property
    def is_trained(self) -> bool:
        return self.updates > 0

    def _features(self, tokens: Seq[int]) -> Features:
        arr = np.asarray(tokens, dtype=np.int64)
        length = len(arr)
        radius = self.config.window_radius
        positions = np.minimum(np.arange(length), self.config.max_positions - 1)
        idx = np.arange(length)[:, None] + np.arange(-radius, radius + 1)[None, :]
        inside = (idx >= 0) & (idx < length)
        window = np.where(inside, arr[np.clip(idx, 0, length - 1)], self.vocab.pad_id)
        first, second = window_pairs(self.config)
        return Features(positions, window, window[:, first], window[:, second])

    def _log_probs(
        self, heads: Seq[int], tokens: Seq[int]
    ) -> Tuple[np.ndarray, Features]:
        """Log-probabilities (H, L, V) of the given heads, plus the features used."""
        feats = self._features(tokens)
        h = np.asarray(heads, dtype=np.int64)[:, None, None]
        offsets = np.arange(feats.window.shape[1])[None, None, :]
        pair_ids = np.arange(feats.first.shape[1])[None, None, :]
        logits = (
            self.params["bias"][h[:, :, 0]]
            + self.params["pos"][h[:, :, 0], feats.positions[None, :]]
            + self.params["tok"][h, offsets, feats.window[None]].sum(axis=2)
            + self.params["pair"][
                h, pair_ids, feats.first[None], feats.second[None]
            ].sum(axis=2)
        )
        allowed = np.stack([head_codomain(self.vocab, head) for head in heads])
        logits = np.where(allowed[:, None, :], logits, -np.inf)
        logits -= logits.max(axis=2, keepdims=True)
        log_norm = np.log(np.exp(logits).sum(axis=2, keepdims=True))
        return logits - log_norm, feats

    def forward(self, tokens: Seq[int]) -> np.ndarray:
        """Probabilities of all heads at all positions, shape (3, L, V)."""
        return np.exp(self._log_probs(range(NUM_HEADS), tokens)[0])

    def predict_unmask(self, xt: MaskedSequence) -> np.ndarray:
        positions = list(xt.masked_positions)
        rows = np.exp(self._log_probs((UNMASK_HEAD,), xt.tokens)[0][0])[positions]
        check_rows_normalized(rows, "unmask head")
        return rows

    def predict_edits(self, x: Sequence) -> Tuple[np.ndarray, np.ndarray]:
        probs = np.exp(self._log_probs((C_HEAD, N_HEAD), x.tokens)[0])
        return probs[0], probs[1]

    def loss_and_grad(
        self, batch: Batch, by_kind: Optional[Dict[str, float]] = None
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """Weighted cross-entropy of the batch, averaged over its examples.

        When 'by_kind' is given, the loss is also accumulated into it per
        HeadExample.kind.
        """
        if not batch:
            raise ModelError("Empty training batch")
        grads = {name: np.zeros_like(self.params[name]) for name in PARAM_NAMES}
        total = 0.0
        scale = 1.0 / len(batch)
        for example in batch:
            if not example.positions:
                continue
            head = example.head
            log_probs, feats = self._log_probs((head,), example.tokens)
            rows = np.asarray(example.positions, dtype=np.int64)
            row_log_probs = log_probs[0][rows]
            if example.soft_targets is None:
                wanted = np.zeros_like(row_log_probs)
                wanted[np.arange(len(rows)), np.asarray(example.targets)] = 1.0
            else:
                wanted = np.asarray(example.soft_targets, dtype=np.float64)
            if np.any(wanted[:, ~head_codomain(self.vocab, head)] > 0):
                raise ModelError(f"Target outside the codomain of head {head}")
            weight = example.weight * scale
            picked = np.where(wanted > 0, row_log_probs, 0.0)
            example_loss = -weight * float((wanted * picked).sum())
            total += example_loss
            if by_kind is not None:
                by_kind[example.kind] = by_kind.get(example.kind, 0.0) + example_loss

            # d(-sum q log softmax)/d(logits) = p - q
            delta = weight * (np.exp(row_log_probs) - wanted)
            grads["bias"][head] += delta.sum(axis=0)
            np.add.at(grads["pos"][head], feats.positions[rows], delta)
            window = feats.window[rows]
            offsets = np.broadcast_to(np.arange(window.shape[1]), window.shape)
            np.add.at(grads["tok"][head], (offsets, window), delta[:, None, :])
            first, second = feats.first[rows], feats.second[rows]
            pair_ids = np.broadcast_to(np.arange(first.shape[1]), first.shape)
            np.add.at(
                grads["pair"][head], (pair_ids, first, second), delta[:, None, :]
            )
        return total, grads

    def loss(self, batch: Batch) -> float:
        return self.loss_and_grad(batch)[0]

    def train_step(
        self,
        batch: Batch,
        learning_rate: float,
        momentum: float = 0.0,
        by_kind: Optional[Dict[str, float]] = None,
        optimizer: Optimizer = Optimizer.SGD,
    ) -> Tuple["FeaturizedModel", float]:
        """One optimizer update; returns the new model and the batch loss.

        SGD uses heavy-ball momentum; Adam ignores 'momentum' and uses
        ADAM_BETAS. The optimizer state travels with the returned model.
        """
        loss, grads = self.loss_and_grad(batch, by_kind)
        if not np.isfinite(loss):
            raise TrainingError(f"Non-finite loss {loss} after {self.updates} updates")
        state = dict(self.opt_state or {})
        params = {}
        if optimizer is Optimizer.ADAM:
            beta1, beta2 = ADAM_BETAS
            step = int(state.get("adam.step", 0)) + 1
            state["adam.step"] = np.asarray(step)
            for name in PARAM_NAMES:
                m = beta1 * state.get(f"m.{name}", 0.0) + (1 - beta1) * grads[name]
                v = beta2 * state.get(f"v.{name}", 0.0) + (1 - beta2) * grads[name] ** 2
                state[f"m.{name}"], state[f"v.{name}"] = m, v
                m_hat = m / (1 - beta1**step)
                v_hat = v / (1 - beta2**step)
                params[name] = self.params[name] - learning_rate * m_hat / (
                    np.sqrt(v_hat) + ADAM_EPS
                )
        else:
            for name in PARAM_NAMES:
                velocity = (
                    momentum * state.get(f"velocity.{name}", 0.0)
                    - learning_rate * grads[name]
                )
                state[f"velocity.{name}"] = velocity
                params[name] = self.params[name] + velocity
        updated = replace(
            self, params=params, updates=self.updates + 1, opt_state=state
        )
        return updated, loss

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in PARAM_NAMES])

    def with_flat_params(self, flat: np.ndarray) -> "FeaturizedModel":
        params = {}
        start = 0
        for name in PARAM_NAMES:
            shape = self.params[name].shape
            size = int(np.prod(shape))
            params[name] = np.asarray(flat[start : start + size]).reshape(shape).copy()
            start += size
        if start != len(flat):
            raise ModelError(f"Expected {start} parameters, got {len(flat)}")
        return replace(self, params=params)

    def same_parameters(self, other: "FeaturizedModel") -> bool:
        return all(
            np.array_equal(self.params[name], other.params[name])
            for name in PARAM_NAMES
        )


def flat_grad(grads: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in PARAM_NAMES])


def save_checkpoint(model: FeaturizedModel, path: Path) -> None:
    """Write model parameters and configuration as JSON."""
    data: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {
            "window_radius": model.config.window_radius,
            "max_positions": model.config.max_positions,
            "init_scale": model.config.init_scale,
            "seed": model.config.seed,
            "pair_features": model.config.pair_features,
        },
        "updates": model.updates,
        "vocab": list(model.vocab.symbols),
        "params": {name: model.params[name].tolist() for name in PARAM_NAMES},
    }
    path.write_text(json.dumps(data), encoding="utf-8")
    logger.info(f"Wrote checkpoint to {path}")


def load_checkpoint(path: Path) -> FeaturizedModel:
    """Read a checkpoint written by save_checkpoint()."""
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an editdiff checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {data.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        vocab = Vocab(tuple(data["vocab"]))
        config = FeaturizedConfig(**data["config"])
        params = {
            name: np.asarray(data["params"][name], dtype=np.float64)
            for name in PARAM_NAMES
        }
        updates = int(data["updates"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path} is missing {exc}") from exc
    for name, shape in param_shapes(len(vocab), config).items():
        if params[name].size == 0 == int(np.prod(shape)):
            params[name] = params[name].reshape(shape)  # JSON drops empty dims
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has the wrong shape")
    logger.info(f"Loaded checkpoint {path} ({updates} updates)")
    return FeaturizedModel(vocab, config, params, updates)
