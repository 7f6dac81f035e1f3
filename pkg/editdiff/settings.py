"""editdiff configuration and command-line options."""
import argparse
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, TextIO, Tuple, Type, Union

from pydantic import BaseSettings, validator
from pydantic.env_settings import SettingsSourceCallable  # pylint: disable=E0611

from editdiff.generate import SelectionPolicy
from editdiff.models import Optimizer
from editdiff.tasks import TaskKind
from editdiff.training import EditTarget, StateSource
from editdiff.types import ConfigError

logger = logging.getLogger(__name__)

Allocation = Tuple[int, int]

# Only these settings may come from the environment (as editdiff_<name>)
ENV_FIELDS = {"out_dir"}


class KeyValueSettingsSource:
    """A custom settings source that loads a flat 'key = value' file.

    Blank lines and lines starting with '#' are skipped. Values are passed on
    as strings; pydantic converts them to the field types.
    """

    def __init__(self, path: Optional[Path]):
        self.path = path

    def parse(self, text: str) -> Dict[str, str]:
        ret = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or not key:
                raise ConfigError(f"{self.path}:{lineno}: expected 'key = value'")
            ret[key] = value.strip()
        return ret

    def __call__(self, _settings: BaseSettings) -> Dict[str, str]:
        """Read the configuration file and return the settings within."""
        if self.path is None:  # skip reading config file
            return {}

        try:
            text = self.path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            logger.info(f"Failed to load configuration file: {exc}")
            return {}
        return self.parse(text)


class Command(Enum):
    """Sub-commands provided by the editdiff application."""

    GEN_TASK = "gen-task"
    TRAIN = "train"
    GENERATE = "generate"
    EVAL = "eval"
    SWEEP = "sweep"

    def __str__(self) -> str:
        return self.value


class ModelKind(Enum):
    FEATURIZED = "featurized"
    TABULAR = "tabular"

    def __str__(self) -> str:
        return self.value


def parse_allocation(arg: str) -> Allocation:
    """Convert an 'M/E' argument into (mask_steps, edit_steps)."""
    mask, sep, edit = arg.partition("/")
    try:
        if not sep:
            raise ValueError(arg)
        return int(mask), int(edit)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"Allocation must look like MASK/EDIT, got {arg!r}"
        ) from None


def format_allocation(allocation: Allocation) -> str:
    return f"{allocation[0]}/{allocation[1]}"


class Settings(BaseSettings):  # type: ignore
    """editdiff settings.

    Below, you find the defaults, these can be overridden in multiple ways:
    - By setting directives in a key = value configuration file (--config)
    - By setting editdiff_out_dir in the environment
    - By passing command-line arguments
    """

    task: Optional[TaskKind] = None
    seed: int = 0
    budget: int = 64
    alloc: List[Allocation] = []
    out: Optional[Path] = None
    out_dir: Path = Path(".")
    checkpoint: Optional[Path] = None
    model: ModelKind = ModelKind.FEATURIZED
    selection_policy: SelectionPolicy = SelectionPolicy.RANDOM
    l_max: int = 512
    max_edit_steps: Optional[int] = None
    num_samples: int = 100
    eval_fraction: float = 0.2
    epochs: int = 60
    sft_epochs: int = 60
    tabular_init_epochs: int = 0
    batch_size: int = 8
    mask_samples: int = 4
    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = 0.01
    min_lr_ratio: float = 0.1
    momentum: float = 0.0
    window_radius: int = 4
    alpha: float = 0.5
    beta: float = 0.0
    state_source: StateSource = StateSource.MODEL_ROLLOUT
    rule_noise_rate: float = 0.1
    edit_target: EditTarget = EditTarget.NEAREST
    max_edit_depth: int = 3
    next_token_weight: float = 1.0
    frozen_rollout: bool = False
    operand_min: int = 0
    operand_max: int = 9
    max_depth: int = 3
    max_len: int = 8
    max_pairs: int = 2
    value_len: int = 2
    record_timing: bool = False
    verbosity: int = 0

    # Class vars: these can not be overridden in the same way as above, only by
    # passing keyword args to Settings.config(). This is because they change the
    # way in which we build the Settings object itself.
    config_file: ClassVar[Optional[Path]] = None

    class Config:
        """Pydantic configuration for Settings class."""

        allow_mutation = False  # make it immutable, once created
        extra = "forbid"  # fail if we pass unsupported Settings fields
        env_prefix = "editdiff_"  # interpret $editdiff_out_dir in env

        @classmethod
        def customise_sources(
            cls,
            init_settings: SettingsSourceCallable,
            env_settings: SettingsSourceCallable,
            file_secret_settings: SettingsSourceCallable,  # pylint: disable=W0613
        ) -> Tuple[SettingsSourceCallable, ...]:
            """Select and prioritize the various configuration sources."""

            def output_env_settings(settings: BaseSettings) -> Dict[str, Any]:
                env = env_settings(settings)
                return {k: v for k, v in env.items() if k in ENV_FIELDS}

            return (
                init_settings,  # from command-line (see main.py)
                output_env_settings,  # from environment variables
                KeyValueSettingsSource(Settings.config_file),  # from config file
            )

    @validator("alloc", pre=True)
    @classmethod
    def _split_allocations(cls, value: Any) -> Any:
        """Accept "48/16 32/32" (or comma-separated) from the config file."""
        if isinstance(value, str):
            try:
                return [
                    parse_allocation(item)
                    for item in value.replace(",", " ").split()
                ]
            except argparse.ArgumentTypeError as exc:
                raise ValueError(str(exc)) from exc
        return value

    @classmethod
    def config(cls, **kwargs: Union[None, Path, str]) -> Type["Settings"]:
        """Configure the class variables in this Settings class.

        This must be done _before_ instantiating Settings objects, as the
        class variables affect how this instantiation is done (e.g. which
        configuration file is read).
        """
        for key, value in kwargs.items():
            assert key in cls.__class_vars__
            setattr(cls, key, value)
        return cls

    @classmethod
    def create(cls, cmdline_args: argparse.Namespace) -> "Settings":
        """Convert the parsed command-line args into a Settings object.

        Only the Settings members given on the command line are passed on
        (the parser default is argparse.SUPPRESS), so that unspecified
        members keep their values from the environment, the configuration
        file, or the defaults above.
        """
        args_dict = cmdline_args.__dict__

        # Use subset of args_dict that directly correspond to fields in Settings
        ret = {arg: value for arg, value in args_dict.items() if arg in cls.__fields__}

        # If user gives --verbose or --quiet on the command line, we _override_
        # any pre-configured verbosity value
        if {"verbose", "quiet"}.intersection(args_dict.keys()):
            ret["verbosity"] = args_dict.get("verbose", 0) - args_dict.get("quiet", 0)

        return cls(**ret)

    def resolve_output(self, path: Optional[Path], default: str) -> Path:
        """Place relative output paths under out_dir."""
        chosen = path if path is not None else Path(default)
        return chosen if chosen.is_absolute() else self.out_dir / chosen


def populate_parser_options(parser: argparse._ActionsContainer) -> None:
    """Add the Settings members to the command-line parser.

    These map directly onto a corresponding Settings member. None of these
    options specify default values (the parser-wide default value is
    argparse.SUPPRESS), so that unspecified options are _omitted_ from the
    resulting argparse.Namespace object.
    """
    parser.add_argument(
        "--task", type=TaskKind, choices=list(TaskKind), help="Synthetic task to use"
    )
    parser.add_argument(
        "--seed", type=int, help="Seed from which all randomness is derived"
    )
    parser.add_argument("--budget", type=int, help="Total number of diffusion steps")
    parser.add_argument(
        "--alloc",
        action="append",
        type=parse_allocation,
        metavar="MASK/EDIT",
        help=(
            "Explicit split of the budget into mask and edit steps, e.g. 48/16 "
            "(repeat for a sweep grid)"
        ),
    )
    parser.add_argument(
        "--out",
        type=Path,
        help="Output file (CSV report, or JSON when it ends in .json)",
    )
    parser.add_argument(
        "--out-dir",
        dest="out_dir",
        type=Path,
        help="Directory for relative output paths (env: EDITDIFF_OUT_DIR)",
    )
    parser.add_argument("--checkpoint", type=Path, help="Model checkpoint file")
    parser.add_argument("--model", type=ModelKind, choices=list(ModelKind))
    parser.add_argument(
        "--selection-policy",
        dest="selection_policy",
        type=SelectionPolicy,
        choices=list(SelectionPolicy),
        help="How the mask phase picks the positions to reveal",
    )
    parser.add_argument(
        "--num-samples",
        dest="num_samples",
        type=int,
        help="Number of generations per evaluated allocation",
    )
    parser.add_argument(
        "--epochs", type=int, help="Number of mixed mask/edit training epochs"
    )
    parser.add_argument(
        "--sft-epochs",
        dest="sft_epochs",
        type=int,
        help="Number of masked-denoising epochs before mixed training",
    )
    parser.add_argument("--alpha", type=float, help="Fraction of edit batches")
    parser.add_argument("--beta", type=float, help="Minimum rollout noise level")
    parser.add_argument(
        "--state-source",
        dest="state_source",
        type=StateSource,
        choices=list(StateSource),
        help="Where edit-training drafts come from",
    )
    parser.add_argument(
        "--edit-target",
        dest="edit_target",
        type=EditTarget,
        choices=list(EditTarget),
        help=(
            "Supervise edit-training drafts towards the nearest training "
            "sequence, or towards the sequence they were rolled out from"
        ),
    )
    parser.add_argument(
        "--tabular-init-epochs",
        dest="tabular_init_epochs",
        type=int,
        help="Epochs of fitting the model to the tabular model first (0: skip)",
    )
    parser.add_argument(
        "--optimizer", type=Optimizer, choices=list(Optimizer), help="Update rule"
    )
    parser.add_argument(
        "--learning-rate",
        dest="learning_rate",
        type=float,
        help="Peak learning rate (cosine-decayed within each stage)",
    )
    parser.add_argument(
        "--record-timing",
        dest="record_timing",
        action="store_true",
        help="Record per-step wall time in reports and traces",
    )

    # The following two do not correspond directly to a Settings member,
    # but the latter is subtracted from the former to make .verbosity.
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        help="Increase log level (WARNING by default, -v: INFO, -vv: DEBUG)",
    )
    parser.add_argument(
        "-q",
        "--quiet",
        action="count",
        help="Decrease log level (WARNING by default, -q: ERROR, -qq: FATAL)",
    )


def setup_cmdline_parser(
    description: str,
) -> Tuple[argparse.ArgumentParser, argparse._ArgumentGroup]:
    """Create command-line parser object and populate it with arguments.

    Return the parser itself (which the caller will use to parse/collect
    command-line arguments), as well as a suitable argument group where the
    caller can add its own additional command-line arguments.
    """
    parser = argparse.ArgumentParser(
        prog="editdiff",
        description=description,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        add_help=False,  # instead, add --help in the "Options" group below
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument(
        "command",
        type=Command,
        choices=list(Command),
        help="What to do",
    )

    option_group = parser.add_argument_group(title="Options")
    populate_parser_options(option_group)
    option_group.add_argument(
        "-h",
        "--help",
        action="help",
        help="Show this help message and exit",
    )

    return parser, option_group


def format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, list):
        return " ".join(format_allocation(tuple(v)) for v in value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def print_config(settings: Settings, out: TextIO) -> None:
    """Serialize the given Settings object into a key = value config file."""
    defaults = {
        name: field.default for name, field in settings.__class__.__fields__.items()
    }
    try:
        has_default_value = {
            name: getattr(settings, name) == default
            for name, default in defaults.items()
        }
    except AttributeError:
        logger.critical(f"Sanity check failed: {settings!r} is missing a field!")
        raise

    simple_settings = json.loads(settings.json())
    lines = [
        "# editdiff configuration (pass with --config)",
        "# (default values are commented)",
    ] + [
        f"{'# ' if has_default_value[name] else ''}{name} = "
        f"{format_value(getattr(settings, name))}"
        for name in simple_settings
    ]
    print("\n".join(lines), file=out)
