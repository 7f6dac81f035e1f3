"""Training stages: masked denoising, and mixed mask/edit training.

Mask batches teach the unmask head (plus next-token prediction on the n
head). Edit batches build a noisy complete draft from the model's own
rollout (or an ablation state source), then supervise both edit heads with
the canonical edit targets towards the reference, or towards the corpus
sequence nearest to the draft. A featurized model can also be initialized
by fitting its heads to the rows of another model (e.g. the tabular one).
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from editdiff.corruption import corrupt
from editdiff.edit_scripts import (
    minimal_edit_script,
    nearest_references,
    script_to_targets,
)
from editdiff.edits import greedy_edit_step
from editdiff.generate import SelectionPolicy, unmask_step
from editdiff.models import (
    C_HEAD,
    EDIT_CACHE_SIZE,
    N_HEAD,
    UNMASK_HEAD,
    Batch,
    FeaturizedModel,
    HeadExample,
    Optimizer,
    head_codomain,
)
from editdiff.types import (
    ConfigError,
    CorruptionConfig,
    DenoiserModel,
    EditTargets,
    Sequence,
    TrainingError,
    Vocab,
)
from editdiff.utils import make_rng

logger = logging.getLogger(__name__)

# independent random streams per (seed, epoch, batch, purpose)
SHUFFLE_STREAM = 1
MIX_STREAM = 2
MASK_STREAM = 3
ROLLOUT_STREAM = 4
DISTILL_STREAM = 5

METRICS_COLUMNS = (
    "epoch",
    "stage",
    "mask_loss",
    "edit_loss",
    "next_loss",
    "edit_cap",
    "dev_validity",
)


class Stage(Enum):
    TABULAR_INIT = "tabular-init"
    MASK_PRETRAIN = "mask-pretrain"
    MASK_SFT = "mask-sft"
    MASK_EDIT = "mask-edit"

    def __str__(self) -> str:
        return self.value


class EditTarget(Enum):
    """Which complete sequence an edit-training draft is supervised towards."""

    NEAREST = "nearest"  # the training sequence closest to the draft
    REFERENCE = "reference"  # the sequence the draft was rolled out from

    def __str__(self) -> str:
        return self.value


class StateSource(Enum):
    """Where edit-training drafts come from."""

    MODEL_ROLLOUT = "model-rollout"
    MASK_ONLY = "mask-only"
    RULE_BASED_NOISE = "rule-based-noise"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class RolloutConfig:
    unmask_k_choices: Tuple[int, ...] = (2, 4, 8, 16)
    max_unmask_steps: int = 64
    max_edit_depth: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.unmask_k_choices or min(self.unmask_k_choices) < 1:
            raise ConfigError(f"Invalid unmask k choices {self.unmask_k_choices}")
        if self.max_unmask_steps < 1 or self.max_edit_depth < 0:
            raise ConfigError(f"Invalid rollout limits in {self}")

    def edit_cap(self, epoch: int, epochs: int) -> int:
        """Curriculum: no edit rollout in the first quarter, then +1 per quarter."""
        return min(self.max_edit_depth, (4 * epoch) // max(epochs, 1))


@dataclass(frozen=True)
class EditStageConfig:
    alpha: float = 0.5
    beta: float = 0.0
    state_source: StateSource = StateSource.MODEL_ROLLOUT
    rule_noise_rate: float = 0.1
    edit_target: EditTarget = EditTarget.NEAREST

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if not 0.0 <= self.rule_noise_rate <= 1.0:
            raise ConfigError(
                f"rule_noise_rate must lie in [0, 1], got {self.rule_noise_rate}"
            )


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer and batching settings shared by all stages.

    The learning rate follows a linear warmup over the first warmup_fraction
    of a stage's updates, then a cosine decay to min_lr_ratio times its peak.
    Each sequence of a mask batch is corrupted mask_samples times.
    """

    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = 0.01
    momentum: float = 0.0
    min_lr_ratio: float = 0.1
    warmup_fraction: float = 0.05
    batch_size: int = 8
    mask_samples: int = 4
    next_token_weight: float = 1.0
    seed: int = 0
    frozen_rollout: bool = False

    def __post_init__(self) -> None:
        if (
            self.batch_size < 1
            or self.mask_samples < 1
            or self.learning_rate < 0
            or not 0 <= self.momentum < 1
            or not 0 <= self.min_lr_ratio <= 1
            or not 0 <= self.warmup_fraction < 1
        ):
            raise ConfigError(f"Invalid training configuration {self}")

    def learning_rate_at(self, step: int, total_steps: int) -> float:
        """Scheduled learning rate of update 'step' (0-based) out of total_steps."""
        peak = self.learning_rate
        warmup = int(total_steps * self.warmup_fraction)
        if warmup > 0 and step < warmup:
            return peak * (step + 1) / warmup
        if total_steps <= warmup:
            return peak * self.min_lr_ratio
        progress = min(max((step - warmup) / (total_steps - warmup), 0.0), 1.0)
        cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
        return peak * (self.min_lr_ratio + cosine * (1.0 - self.min_lr_ratio))


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    stage: Stage
    mask_loss: float
    edit_loss: float
    next_loss: float
    edit_cap: int
    dev_validity: Optional[float] = None

    def as_row(self) -> List[str]:
        return [
            str(self.epoch),
            str(self.stage),
            f"{self.mask_loss:.6f}",
            f"{self.edit_loss:.6f}",
            f"{self.next_loss:.6f}",
            str(self.edit_cap),
            "" if self.dev_validity is None else f"{self.dev_validity:.4f}",
        ]


def sample_noise_level(rng: np.random.Generator, beta: float = 0.0) -> float:
    """Draw t uniformly from (beta, 1]."""
    return 1.0 - float(rng.random()) * (1.0 - beta)


def rollout_state(
    model: DenoiserModel,
    x_star: Sequence,
    rcfg: RolloutConfig,
    scfg: EditStageConfig,
    rng: np.random.Generator,
    edit_depth_cap: int = 0,
) -> Sequence:
    """Produce a noisy complete draft of x_star with the model itself.

    Corrupt x_star at t in (beta, 1], unmask until no MASK is left with a
    random k per step, then run up to edit_depth_cap unsupervised edit steps.
    """
    t = sample_noise_level(rng, scfg.beta)
    xt = corrupt(x_star, CorruptionConfig(t, int(rng.integers(2**31))), model.vocab)
    x = xt.base
    for step in range(rcfg.max_unmask_steps):
        if model.vocab.mask_id not in x.region:
            break
        k = int(rng.choice(rcfg.unmask_k_choices))
        if step == rcfg.max_unmask_steps - 1:
            k = len(x.region)  # last permitted step reveals everything
        x, _ = unmask_step(model, x, k, SelectionPolicy.CONFIDENCE, rng)

    depth = int(rng.integers(0, edit_depth_cap + 1)) if edit_depth_cap > 0 else 0
    for _ in range(depth):
        outcome, empty = greedy_edit_step(model, x)
        if empty:
            break
        x = outcome.result
    return x


def build_example(x_m: Sequence, x_star: Sequence, vocab: Vocab) -> EditTargets:
    """Token-wise edit supervision taking the draft x_m towards x_star."""
    return script_to_targets(x_m, minimal_edit_script(x_m, x_star), vocab)


def rule_based_noise(
    x_star: Sequence, rate: float, vocab: Vocab, rng: np.random.Generator
) -> Tuple[Sequence, int]:
    """Perturb each generated token (except the final EOS) with probability rate.

    A perturbed token is deleted, replaced by a different ordinary symbol, or
    followed by an inserted ordinary symbol, each with equal probability.
    Return the perturbed sequence and the number of perturbations.
    """
    symbols = np.asarray(vocab.content_ids, dtype=np.int64)
    region = list(x_star.region)
    tail = region[-1:] if region and region[-1] == vocab.eos_id else []
    body = region[: len(region) - len(tail)]
    out: List[int] = []
    count = 0
    for token in body:
        if rng.random() >= rate:
            out.append(token)
            continue
        count += 1
        kind = int(rng.integers(3))
        if kind == 0:
            continue
        if kind == 1:
            choices = symbols[symbols != token]
            out.append(int(rng.choice(choices)) if len(choices) else token)
        else:
            out.extend([token, int(rng.choice(symbols))])
    return x_star.with_region(out + tail), count


def ablation_state(
    x_star: Sequence,
    mode: StateSource,
    scfg: EditStageConfig,
    rng: np.random.Generator,
    model: Optional[DenoiserModel] = None,
    rcfg: Optional[RolloutConfig] = None,
) -> Sequence:
    """Cheaper draft sources: rollout without edit steps, or rule-based noise."""
    if mode is StateSource.MASK_ONLY:
        if model is None:
            raise ConfigError("mask-only drafts need a model to unmask with")
        return rollout_state(model, x_star, rcfg or RolloutConfig(), scfg, rng, 0)
    if mode is StateSource.RULE_BASED_NOISE:
        if model is None:
            raise ConfigError("rule-based noise needs the model vocabulary")
        return rule_based_noise(x_star, scfg.rule_noise_rate, model.vocab, rng)[0]
    raise ConfigError(f"{mode} is not an ablation state source")


def mask_examples(
    x0: Sequence, rng: np.random.Generator, next_token_weight: float, vocab: Vocab
) -> List[HeadExample]:
    """Unmask-head rows for one corrupted copy of x0, plus next-token rows."""
    t = sample_noise_level(rng)
    xt = corrupt(x0, CorruptionConfig(t, int(rng.integers(2**31))), vocab)
    examples = []
    positions = xt.masked_positions
    if positions:
        examples.append(
            HeadExample(
                tokens=xt.tokens,
                head=UNMASK_HEAD,
                positions=positions,
                targets=tuple(x0.tokens[p] for p in positions),
                weight=1.0 / (t * len(x0.region)),
                kind="mask",
            )
        )
    slots = tuple(range(max(x0.prompt_len - 1, 0), len(x0) - 1))
    if next_token_weight > 0 and slots:
        examples.append(
            HeadExample(
                tokens=x0.tokens,
                head=N_HEAD,
                positions=slots,
                targets=tuple(x0.tokens[i + 1] for i in slots),
                weight=next_token_weight / len(slots),
                kind="next",
            )
        )
    return examples


def edit_examples(x_m: Sequence, targets: EditTargets) -> List[HeadExample]:
    """Edit-head rows: c on generated positions, n where the loss mask is set."""
    c_slots = tuple(range(x_m.prompt_len, len(x_m)))
    n_pairs = [
        (i, cand)
        for i, (cand, on) in enumerate(zip(targets.n_star, targets.loss_mask))
        if on and cand is not None
    ]
    examples = []
    if c_slots:
        examples.append(
            HeadExample(
                tokens=x_m.tokens,
                head=C_HEAD,
                positions=c_slots,
                targets=tuple(targets.c_star[i] for i in c_slots),
                weight=1.0 / len(c_slots),
                kind="edit",
            )
        )
    if n_pairs:
        examples.append(
            HeadExample(
                tokens=x_m.tokens,
                head=N_HEAD,
                positions=tuple(i for i, _ in n_pairs),
                targets=tuple(cand for _, cand in n_pairs),
                weight=1.0 / len(n_pairs),
                kind="edit",
            )
        )
    return examples


def edit_draft(
    model: DenoiserModel,
    x_star: Sequence,
    rcfg: RolloutConfig,
    scfg: EditStageConfig,
    rng: np.random.Generator,
    edit_depth_cap: int,
) -> Sequence:
    if scfg.state_source is StateSource.MODEL_ROLLOUT:
        return rollout_state(model, x_star, rcfg, scfg, rng, edit_depth_cap)
    return ablation_state(x_star, scfg.state_source, scfg, rng, model, rcfg)


def edit_reference(
    x_m: Sequence,
    x_star: Sequence,
    target: EditTarget,
    nearest: Callable[[Sequence], List[Sequence]],
) -> Sequence:
    """The sequence a draft is supervised towards.

    With EditTarget.NEAREST this is the first of the training sequences
    closest to the draft, so that an invalid draft is repaired in as few
    edits as the corpus allows; x_star when no sequence shares its prompt.
    """
    if target is EditTarget.REFERENCE:
        return x_star
    candidates = nearest(x_m)
    return candidates[0] if candidates else x_star


def _steps_per_epoch(corpus_size: int, batch_size: int) -> int:
    return -(-corpus_size // batch_size)


def _epoch_metrics(
    epoch: int,
    stage: Stage,
    totals: Dict[str, float],
    batches: int,
    cap: int,
    dev_validity: Optional[float],
) -> EpochMetrics:
    mean = {kind: total / max(batches, 1) for kind, total in totals.items()}
    row = EpochMetrics(
        epoch=epoch,
        stage=stage,
        mask_loss=mean.get("mask", 0.0),
        edit_loss=mean.get("edit", 0.0),
        next_loss=mean.get("next", 0.0),
        edit_cap=cap,
        dev_validity=dev_validity,
    )
    logger.info(
        f"{stage} epoch {epoch}: mask {row.mask_loss:.4f}, "
        f"edit {row.edit_loss:.4f}, next {row.next_loss:.4f}, cap {cap}"
    )
    return row


def train_stage(
    model: FeaturizedModel,
    corpus: Seq[Sequence],
    stage: Stage,
    epochs: int,
    tcfg: TrainingConfig = TrainingConfig(),
    scfg: EditStageConfig = EditStageConfig(),
    rcfg: RolloutConfig = RolloutConfig(),
    dev_validity: Optional[Callable[[FeaturizedModel], float]] = None,
) -> Tuple[FeaturizedModel, List[EpochMetrics]]:
    """Run one training stage over 'corpus' for 'epochs' epochs.

    Batches are drawn in a seeded shuffled order. In the mask-edit stage
    each batch is an edit batch with probability alpha, otherwise a plain
    mask batch; the mixing draw uses its own random stream. The learning
    rate schedule spans the whole stage.
    """
    if not corpus:
        raise TrainingError("Cannot train on an empty corpus")
    if epochs < 0:
        raise ConfigError(f"epochs must not be negative, got {epochs}")
    if stage is Stage.TABULAR_INIT:
        raise ConfigError("Use initialize_from() for the tabular-init stage")
    vocab = model.vocab
    if stage is Stage.MASK_PRETRAIN:
        corpus = [Sequence(x.tokens, 0) for x in corpus]
    rollout_model: DenoiserModel = model
    nearest = lru_cache(maxsize=EDIT_CACHE_SIZE)(
        lambda x: nearest_references(x, corpus)
    )
    total_steps = epochs * _steps_per_epoch(len(corpus), tcfg.batch_size)
    step = 0
    metrics: List[EpochMetrics] = []

    for epoch in range(epochs):
        cap = rcfg.edit_cap(epoch, epochs) if stage is Stage.MASK_EDIT else 0
        order = make_rng(tcfg.seed, epoch, SHUFFLE_STREAM).permutation(len(corpus))
        totals: Dict[str, float] = {}
        batches = 0
        for b, start in enumerate(range(0, len(corpus), tcfg.batch_size)):
            chunk = [corpus[i] for i in order[start : start + tcfg.batch_size].tolist()]
            is_edit = (
                stage is Stage.MASK_EDIT
                and make_rng(tcfg.seed, epoch, b, MIX_STREAM).random() < scfg.alpha
            )
            batch: Batch = []
            if is_edit:
                if not tcfg.frozen_rollout:
                    rollout_model = model
                for r, x_star in enumerate(chunk):
                    rng = make_rng(tcfg.seed, epoch, b, ROLLOUT_STREAM, r)
                    x_m = edit_draft(rollout_model, x_star, rcfg, scfg, rng, cap)
                    y = edit_reference(x_m, x_star, scfg.edit_target, nearest)
                    batch += edit_examples(x_m, build_example(x_m, y, vocab))
            else:
                rng = make_rng(tcfg.seed, epoch, b, MASK_STREAM)
                for x0 in chunk:
                    for _ in range(tcfg.mask_samples):
                        batch += mask_examples(x0, rng, tcfg.next_token_weight, vocab)
            lr = tcfg.learning_rate_at(step, total_steps)
            step += 1
            if not batch:
                continue
            model, _ = model.train_step(
                batch, lr, tcfg.momentum, by_kind=totals, optimizer=tcfg.optimizer
            )
            batches += 1

        score = dev_validity(model) if dev_validity is not None else None
        metrics.append(_epoch_metrics(epoch, stage, totals, batches, cap, score))
    return model, metrics


def soft_examples(
    reference: DenoiserModel,
    x0: Sequence,
    draft: Sequence,
    rng: np.random.Generator,
) -> List[HeadExample]:
    """Rows fitting all three heads to another model's rows.

    The unmask head is fitted on a corrupted copy of x0, the edit heads on
    the complete draft: c on generated positions, n from the last prompt
    slot on.
    """
    vocab = reference.vocab
    t = sample_noise_level(rng)
    xt = corrupt(x0, CorruptionConfig(t, int(rng.integers(2**31))), vocab)
    examples = []
    positions = xt.masked_positions
    if positions:
        rows = reference.predict_unmask(xt)
        examples.append(
            _soft_example(xt.tokens, UNMASK_HEAD, positions, rows, vocab, "mask")
        )
    c_rows, n_rows = reference.predict_edits(draft)
    c_slots = tuple(range(draft.prompt_len, len(draft)))
    n_slots = tuple(range(max(draft.prompt_len - 1, 0), len(draft)))
    for head, slots, rows in ((C_HEAD, c_slots, c_rows), (N_HEAD, n_slots, n_rows)):
        if slots:
            picked = rows[list(slots)]
            examples.append(
                _soft_example(draft.tokens, head, slots, picked, vocab, "edit")
            )
    return examples


def _soft_example(
    tokens: Tuple[int, ...],
    head: int,
    positions: Tuple[int, ...],
    rows: np.ndarray,
    vocab: Vocab,
    kind: str,
) -> HeadExample:
    rows = np.where(head_codomain(vocab, head)[None, :], rows, 0.0)
    rows = rows / rows.sum(axis=1, keepdims=True)
    return HeadExample(
        tokens=tokens,
        head=head,
        positions=positions,
        targets=tuple(int(i) for i in np.argmax(rows, axis=1)),
        weight=1.0 / len(positions),
        kind=kind,
        soft_targets=tuple(tuple(float(p) for p in row) for row in rows),
    )


def initialize_from(
    model: FeaturizedModel,
    reference: DenoiserModel,
    corpus: Seq[Sequence],
    epochs: int,
    tcfg: TrainingConfig = TrainingConfig(),
    scfg: EditStageConfig = EditStageConfig(),
    rcfg: RolloutConfig = RolloutConfig(),
) -> Tuple[FeaturizedModel, List[EpochMetrics]]:
    """Fit the featurized heads to the rows of 'reference' (tabular-init stage).

    Every sequence of a batch contributes one corrupted state for the unmask
    head and one complete draft for the edit heads. Drafts alternate between
    rollouts of the reference model itself and rule-based noise, so that both
    parallel-decoding mistakes and local perturbations get repaired.
    """
    if not corpus:
        raise TrainingError("Cannot train on an empty corpus")
    if epochs < 0:
        raise ConfigError(f"epochs must not be negative, got {epochs}")
    if reference.vocab != model.vocab:
        raise ConfigError("The reference model uses a different vocabulary")
    total_steps = epochs * _steps_per_epoch(len(corpus), tcfg.batch_size)
    step = 0
    metrics: List[EpochMetrics] = []
    for epoch in range(epochs):
        order = make_rng(tcfg.seed, epoch, SHUFFLE_STREAM).permutation(len(corpus))
        totals: Dict[str, float] = {}
        batches = 0
        for b, start in enumerate(range(0, len(corpus), tcfg.batch_size)):
            batch: Batch = []
            for r, i in enumerate(order[start : start + tcfg.batch_size].tolist()):
                x0 = corpus[i]
                rng = make_rng(tcfg.seed, epoch, b, DISTILL_STREAM, r)
                if (epoch + r) % 2 == 0:
                    draft = rollout_state(reference, x0, rcfg, scfg, rng)
                else:
                    draft, _ = rule_based_noise(
                        x0, scfg.rule_noise_rate, model.vocab, rng
                    )
                batch += soft_examples(reference, x0, draft, rng)
            lr = tcfg.learning_rate_at(step, total_steps)
            step += 1
            model, _ = model.train_step(
                batch, lr, tcfg.momentum, by_kind=totals, optimizer=tcfg.optimizer
            )
            batches += 1
        row = _epoch_metrics(epoch, Stage.TABULAR_INIT, totals, batches, 0, None)
        metrics.append(row)
    return model, metrics


def write_metrics(path: Path, metrics: Seq[EpochMetrics]) -> None:
    """Append metrics rows to a CSV file, writing the header for a new file."""
    new_file = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as metrics_file:
        writer = csv.writer(metrics_file, lineterminator="\n")
        if new_file:
            writer.writerow(METRICS_COLUMNS)
        writer.writerows(row.as_row() for row in metrics)
    logger.info(f"Appended {len(metrics)} metrics rows to {path}")
