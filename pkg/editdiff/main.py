"""Masked diffusion generation with learned edit-based refinement.

A masked diffusion model drafts a sequence by unmasking tokens in parallel;
an edit operator (replace, delete, insert) then repairs the draft in a few
extra steps. Sub-commands:

  gen-task   write a synthetic task corpus (and its .vocab file)
  train      train a featurized model (mask-sft, then mask-edit)
  generate   write JSON Lines generation traces for the evaluation split
  eval       evaluate one or more mask/edit step allocations
  sweep      evaluate several splits of one fixed step budget
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, no_type_check

import importlib_metadata
from pydantic import ValidationError

from editdiff.evaluate import EvalConfig, evaluate, evaluate_cell, sweep_allocation
from editdiff.generate import (
    GenerationConfig,
    SelectionPolicy,
    allocate_steps,
    generate,
    trace_lines,
)
from editdiff.models import (
    FeaturizedConfig,
    FeaturizedModel,
    fit_tabular,
    load_checkpoint,
    save_checkpoint,
)
from editdiff.settings import (
    Command,
    ModelKind,
    Settings,
    print_config,
    setup_cmdline_parser,
)
from editdiff.tasks import Task, TaskSpec, make_task, split_corpus
from editdiff.training import (
    EditStageConfig,
    EpochMetrics,
    RolloutConfig,
    Stage,
    TrainingConfig,
    initialize_from,
    train_stage,
    write_metrics,
)
from editdiff.types import (
    CheckpointError,
    ConfigError,
    DenoiserModel,
    EditDiffError,
    Sequence,
)
from editdiff.utils import derive_seed
from editdiff.vocab import format_sequence, write_corpus, write_vocab

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINT = "model.json"
DEV_VALIDITY_SAMPLES = 20


@no_type_check
def version() -> str:
    """Returns the version of editdiff."""

    # This function is extracted to allow annotation with `@no_type_check`.
    return str(importlib_metadata.version("editdiff"))


def build_task(settings: Settings) -> Task:
    if settings.task is None:
        raise ConfigError("--task is required for this command")
    return make_task(
        TaskSpec(
            kind=settings.task,
            operand_min=settings.operand_min,
            operand_max=settings.operand_max,
            max_depth=settings.max_depth,
            max_len=settings.max_len,
            max_pairs=settings.max_pairs,
            value_len=settings.value_len,
            seed=settings.seed,
        )
    )


def load_model(
    settings: Settings, task: Task, train_part: Tuple[Sequence, ...]
) -> DenoiserModel:
    """The tabular model is fitted on the spot; featurized ones are loaded."""
    if settings.model is ModelKind.TABULAR:
        return fit_tabular(train_part, task.vocab)
    path = settings.resolve_output(settings.checkpoint, DEFAULT_CHECKPOINT)
    model = load_checkpoint(path)
    if model.vocab != task.vocab:
        raise CheckpointError(
            f"{path}: checkpoint vocabulary does not match the {settings.task} task"
        )
    return model


def eval_config(settings: Settings) -> EvalConfig:
    return EvalConfig(
        seed=settings.seed,
        num_samples=settings.num_samples,
        selection_policy=settings.selection_policy,
        l_max=settings.l_max,
        max_edit_steps=settings.max_edit_steps,
        record_timing=settings.record_timing,
    )


def run_gen_task(settings: Settings) -> None:
    task = build_task(settings)
    path = settings.resolve_output(settings.out, f"{task.spec.kind}.txt")
    write_corpus(path, task.vocab, task.corpus)
    write_vocab(path.with_suffix(".vocab"), task.vocab)


def dev_validity_check(
    settings: Settings, task: Task, references: Tuple[Sequence, ...]
) -> Callable[[FeaturizedModel], float]:
    cfg = EvalConfig(
        seed=settings.seed,
        num_samples=min(len(references), DEV_VALIDITY_SAMPLES),
        selection_policy=SelectionPolicy.CONFIDENCE,
        l_max=settings.l_max,
    )
    allocation = allocate_steps(settings.budget)

    def validity(model: FeaturizedModel) -> float:
        row = evaluate_cell(model, task, references, allocation, cfg, "dev")
        return row.validity_rate

    return validity


def run_train(settings: Settings) -> None:
    task = build_task(settings)
    train_part, eval_part = split_corpus(
        task.corpus, settings.eval_fraction, settings.seed
    )
    model = FeaturizedModel.initialize(
        task.vocab,
        FeaturizedConfig(window_radius=settings.window_radius, seed=settings.seed),
    )
    tcfg = TrainingConfig(
        optimizer=settings.optimizer,
        learning_rate=settings.learning_rate,
        momentum=settings.momentum,
        min_lr_ratio=settings.min_lr_ratio,
        batch_size=settings.batch_size,
        mask_samples=settings.mask_samples,
        next_token_weight=settings.next_token_weight,
        seed=settings.seed,
        frozen_rollout=settings.frozen_rollout,
    )
    scfg = EditStageConfig(
        alpha=settings.alpha,
        beta=settings.beta,
        state_source=settings.state_source,
        rule_noise_rate=settings.rule_noise_rate,
        edit_target=settings.edit_target,
    )
    rcfg = RolloutConfig(
        max_edit_depth=settings.max_edit_depth, rng_seed=settings.seed
    )
    dev_validity = dev_validity_check(settings, task, eval_part)

    metrics: List[EpochMetrics] = []
    if settings.tabular_init_epochs > 0:
        tabular = fit_tabular(train_part, task.vocab)
        model, init_metrics = initialize_from(
            model, tabular, train_part, settings.tabular_init_epochs, tcfg, scfg, rcfg
        )
        metrics += init_metrics
    for stage, epochs in (
        (Stage.MASK_SFT, settings.sft_epochs),
        (Stage.MASK_EDIT, settings.epochs),
    ):
        model, stage_metrics = train_stage(
            model, train_part, stage, epochs, tcfg, scfg, rcfg, dev_validity
        )
        metrics += stage_metrics
    save_checkpoint(
        model, settings.resolve_output(settings.checkpoint, DEFAULT_CHECKPOINT)
    )
    write_metrics(settings.resolve_output(settings.out, "metrics.csv"), metrics)


def run_generate(settings: Settings) -> None:
    task = build_task(settings)
    train_part, eval_part = split_corpus(
        task.corpus, settings.eval_fraction, settings.seed
    )
    model = load_model(settings, task, train_part)
    lines: List[str] = []
    results: List[str] = []
    for i in range(settings.num_samples):
        reference = eval_part[i % len(eval_part)]
        mask_steps, edit_steps = (
            settings.alloc[0] if settings.alloc else allocate_steps(settings.budget)
        )
        gcfg = GenerationConfig(
            total_steps=mask_steps + edit_steps,
            mask_steps=mask_steps,
            edit_steps=edit_steps,
            selection_policy=settings.selection_policy,
            l_max=settings.l_max,
            max_edit_steps=settings.max_edit_steps,
            rng_seed=derive_seed(settings.seed, i),
            record_timing=settings.record_timing,
        )
        result, trace = generate(model, reference.prompt, len(reference.region), gcfg)
        lines += trace_lines(trace, task.vocab, settings.record_timing)
        results.append(format_sequence(task.vocab, result))

    if settings.out is None:
        print("\n".join(lines))
        return
    path = settings.resolve_output(settings.out, "traces.jsonl")
    path.write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    logger.info(f"Wrote {len(results)} generation traces to {path}")
    print("\n".join(results))


def run_report(settings: Settings, command: Command) -> None:
    task = build_task(settings)
    train_part, eval_part = split_corpus(
        task.corpus, settings.eval_fraction, settings.seed
    )
    model = load_model(settings, task, train_part)
    cfg = eval_config(settings)
    name = str(settings.model)
    if command is Command.SWEEP:
        report = sweep_allocation(
            model, task, eval_part, settings.budget, settings.alloc, cfg, name
        )
    else:
        grid = settings.alloc or [allocate_steps(settings.budget)]
        report = evaluate(model, task, eval_part, grid, cfg, name)

    if settings.out is None:
        print(report.to_csv(), end="")
    else:
        report.write(settings.resolve_output(settings.out, "report.csv"))


COMMANDS: Dict[Command, Callable[[Settings], None]] = {
    Command.GEN_TASK: run_gen_task,
    Command.TRAIN: run_train,
    Command.GENERATE: run_generate,
    Command.EVAL: lambda settings: run_report(settings, Command.EVAL),
    Command.SWEEP: lambda settings: run_report(settings, Command.SWEEP),
}


def build_parser() -> argparse.ArgumentParser:
    """Create the CLI parser."""
    parser, option_group = setup_cmdline_parser(description=__doc__)
    option_group.add_argument(
        "-V",
        "--version",
        action="version",
        version=f"editdiff v{version()}",
        help="Print the version number of editdiff",
    )
    option_group.add_argument(
        "--config",
        dest="config_file",
        type=Path,
        default=None,
        help="Flat 'key = value' configuration file",
    )
    option_group.add_argument(
        "--generate-config",
        action="store_true",
        default=False,
        help="Print a configuration file with the current settings, and exit",
    )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Command-line entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings.config(config_file=args.config_file).create(args)
    except ValidationError as exc:
        return parser.error(str(exc))  # exit code 2
    except ConfigError as exc:
        return parser.error(exc.msg)

    logging.basicConfig(level=logging.WARNING - 10 * settings.verbosity)

    if args.generate_config:
        print_config(settings, sys.stdout)
        return 0

    # Exit codes:
    # 0 - success
    # 1 - the run failed (an EditDiffError propagated)
    # 2 - command-line or configuration error
    try:
        COMMANDS[args.command](settings)
    except ConfigError as exc:
        return parser.error(exc.msg)
    except EditDiffError as exc:
        logger.error(exc.msg)
        return 1
    return 0

