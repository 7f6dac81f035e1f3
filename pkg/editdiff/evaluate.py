"""Evaluate a model on a task over a grid of step allocations.

Report columns are fixed; timing columns are only present when timing is
recorded, so default reports are byte-identical across runs.
"""

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np

from editdiff.generate import GenerationConfig, SelectionPolicy, generate
from editdiff.models import FeaturizedModel
from editdiff.tasks import Task
from editdiff.types import ConfigError, DenoiserModel, Sequence, UntrainedModelError
from editdiff.utils import derive_seed, median_ms

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "task",
    "model",
    "seed",
    "budget",
    "mask_steps",
    "edit_steps",
    "samples",
    "validity_rate",
    "exact_match",
    "mean_edit_steps",
)
TIMING_COLUMNS = ("median_mask_step_ms", "median_edit_step_ms")

Allocation = Tuple[int, int]


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    num_samples: int = 100
    selection_policy: SelectionPolicy = SelectionPolicy.RANDOM
    l_max: int = 512
    max_edit_steps: Optional[int] = None
    record_timing: bool = False

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ConfigError(f"num_samples must be positive, got {self.num_samples}")


@dataclass(frozen=True)
class EvalRow:
    task: str
    model: str
    seed: int
    budget: int
    mask_steps: int
    edit_steps: int
    samples: int
    validity_rate: float
    exact_match: float
    mean_edit_steps: float
    median_mask_step_ms: float = field(default=0.0, compare=False)
    median_edit_step_ms: float = field(default=0.0, compare=False)

    def values(self, record_timing: bool) -> List[str]:
        columns = REPORT_COLUMNS + (TIMING_COLUMNS if record_timing else ())
        out = []
        for name in columns:
            value = getattr(self, name)
            out.append(f"{value:.4f}" if isinstance(value, float) else str(value))
        return out


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    record_timing: bool = False

    @property
    def columns(self) -> Tuple[str, ...]:
        return REPORT_COLUMNS + (TIMING_COLUMNS if self.record_timing else ())

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(row.values(self.record_timing) for row in self.rows)
        return buffer.getvalue()

    def to_json(self) -> str:
        records = []
        for row in self.rows:
            record = asdict(row)
            if not self.record_timing:
                for name in TIMING_COLUMNS:
                    del record[name]
            records.append(record)
        return json.dumps(records, indent=2) + "\n"

    def write(self, path: Path) -> None:
        """Write CSV, or JSON when the path ends in .json."""
        text = self.to_json() if path.suffix == ".json" else self.to_csv()
        path.write_text(text, encoding="utf-8")
        logger.info(f"Wrote {len(self.rows)} report rows to {path}")


def check_trained(model: DenoiserModel) -> None:
    if isinstance(model, FeaturizedModel) and not model.is_trained:
        raise UntrainedModelError(
            "Refusing to evaluate a featurized model that was never trained"
        )


def evaluate_cell(
    model: DenoiserModel,
    task: Task,
    references: Seq[Sequence],
    allocation: Allocation,
    cfg: EvalConfig,
    model_name: str,
) -> EvalRow:
    """Run num_samples generations under one allocation and score them."""
    mask_steps, edit_steps = allocation
    valid = exact = 0
    edit_steps_used: List[int] = []
    mask_durations: List[int] = []
    edit_durations: List[int] = []
    for i in range(cfg.num_samples):
        reference = references[i % len(references)]
        gcfg = GenerationConfig(
            total_steps=mask_steps + edit_steps,
            mask_steps=mask_steps,
            edit_steps=edit_steps,
            selection_policy=cfg.selection_policy,
            l_max=cfg.l_max,
            max_edit_steps=cfg.max_edit_steps,
            rng_seed=derive_seed(cfg.seed, i),
            record_timing=cfg.record_timing,
        )
        result, trace = generate(model, reference.prompt, len(reference.region), gcfg)
        valid += task.is_valid(result)
        exact += result == reference
        edit_steps_used.append(trace.edit_steps_used)
        mask_durations += trace.durations_ns("mask")
        edit_durations += trace.durations_ns("edit")

    row = EvalRow(
        task=str(task.spec.kind),
        model=model_name,
        seed=cfg.seed,
        budget=mask_steps + edit_steps,
        mask_steps=mask_steps,
        edit_steps=edit_steps,
        samples=cfg.num_samples,
        validity_rate=valid / cfg.num_samples,
        exact_match=exact / cfg.num_samples,
        mean_edit_steps=float(np.mean(edit_steps_used)),
        median_mask_step_ms=median_ms(mask_durations),
        median_edit_step_ms=median_ms(edit_durations),
    )
    logger.info(
        f"{mask_steps}/{edit_steps}: validity {row.validity_rate:.3f}, "
        f"exact {row.exact_match:.3f}, edit steps {row.mean_edit_steps:.2f}"
    )
    return row


def evaluate(
    model: DenoiserModel,
    task: Task,
    references: Seq[Sequence],
    grid: Seq[Allocation],
    cfg: EvalConfig = EvalConfig(),
    model_name: str = "model",
) -> EvalReport:
    """Evaluate 'model' on every allocation of 'grid', in grid order."""
    check_trained(model)
    if not references:
        raise ConfigError("Nothing to evaluate: the evaluation split is empty")
    for mask_steps, edit_steps in grid:
        if mask_steps < 0 or edit_steps < 0 or mask_steps + edit_steps < 1:
            raise ConfigError(f"Invalid allocation {mask_steps}/{edit_steps}")
    report = EvalReport(record_timing=cfg.record_timing)
    for allocation in grid:
        report.rows.append(
            evaluate_cell(model, task, references, allocation, cfg, model_name)
        )
    return report


def default_allocations(total_budget: int) -> List[Allocation]:
    """Mask-only, quarter, half and edit-only splits of a budget."""
    quarter = (3 * total_budget) // 4
    half = total_budget // 2
    return [
        (total_budget, 0),
        (quarter, total_budget - quarter),
        (half, total_budget - half),
        (0, total_budget),
    ]


def sweep_allocation(
    model: DenoiserModel,
    task: Task,
    references: Seq[Sequence],
    total_budget: int,
    allocations: Optional[Seq[Allocation]] = None,
    cfg: EvalConfig = EvalConfig(),
    model_name: str = "model",
) -> EvalReport:
    """Evaluate several mask/edit splits of one fixed step budget."""
    if total_budget < 1:
        raise ConfigError(f"Budget must be at least 1, got {total_budget}")
    grid = list(allocations) if allocations else default_allocations(total_budget)
    for mask_steps, edit_steps in grid:
        if mask_steps + edit_steps != total_budget:
            raise ConfigError(
                f"Allocation {mask_steps}/{edit_steps} does not sum to the "
                f"budget of {total_budget} steps"
            )
    return evaluate(model, task, references, grid, cfg, model_name)
