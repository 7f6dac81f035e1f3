"""Test how settings cascade/combine across command-line, config file, etc."""
import argparse
import io
from pathlib import Path
from typing import List, Optional

import pytest
from pydantic import ValidationError

from editdiff.generate import SelectionPolicy
from editdiff.main import build_parser
from editdiff.models import Optimizer
from editdiff.settings import (
    KeyValueSettingsSource,
    ModelKind,
    Settings,
    format_allocation,
    parse_allocation,
    print_config,
)
from editdiff.tasks import TaskKind
from editdiff.training import EditTarget, StateSource
from editdiff.types import ConfigError

EXPECT_DEFAULTS = dict(
    task=None,
    seed=0,
    budget=64,
    alloc=[],
    out=None,
    out_dir=Path("."),
    model=ModelKind.FEATURIZED,
    selection_policy=SelectionPolicy.RANDOM,
    state_source=StateSource.MODEL_ROLLOUT,
    record_timing=False,
    verbosity=0,
)


def run_build_settings(cmdl: List[str], config_file: Optional[Path] = None) -> Settings:
    """Combine the two relevant function calls to get a Settings."""
    parser = build_parser()
    args = parser.parse_args(cmdl)
    return Settings.config(config_file=config_file).create(args)


def make_settings_dict(**kwargs):
    """Return a copy of EXPECT_DEFAULTS, with the given customizations applied."""
    ret = EXPECT_DEFAULTS.copy()
    ret.update(kwargs)
    return ret


def subset(settings: Settings, keys) -> dict:
    return {key: getattr(settings, key) for key in keys}


@pytest.fixture
def setup_env(monkeypatch):
    """Allow setup of editdiff_* env vars in a test case"""

    def _inner(**kwargs: str):
        for k, v in kwargs.items():
            monkeypatch.setenv(f"editdiff_{k}", v)

    return _inner


@pytest.mark.parametrize(
    "config_settings,env_settings,cmdline_settings,expect",
    [
        pytest.param(
            None,  # config file disabled
            {},
            [],
            EXPECT_DEFAULTS,
            id="no_config_file__uses_defaults",
        ),
        pytest.param(
            {},  # empty config file
            {},
            [],
            EXPECT_DEFAULTS,
            id="empty_config_file__uses_defaults",
        ),
        pytest.param(
            dict(task="brackets", alloc="48/16 32/32", record_timing="true"),
            {},
            [],
            make_settings_dict(
                task=TaskKind.BRACKETS, alloc=[(48, 16), (32, 32)], record_timing=True
            ),
            id="config_file__overrides_some_defaults",
        ),
        pytest.param(
            dict(seed="3", model="tabular"),
            {},
            ["--seed", "7"],
            make_settings_dict(seed=7, model=ModelKind.TABULAR),
            id="cmdline__overrides_config_file",
        ),
        pytest.param(
            dict(out_dir="from_config"),
            dict(out_dir="from_env"),
            [],
            make_settings_dict(out_dir=Path("from_env")),
            id="env_out_dir__overrides_config_file",
        ),
        pytest.param(
            None,
            dict(out_dir="from_env"),
            ["--out-dir", "from_cmdline"],
            make_settings_dict(out_dir=Path("from_cmdline")),
            id="cmdline__overrides_env_out_dir",
        ),
        pytest.param(
            None,
            dict(seed="5", task="arithmetic"),
            [],
            EXPECT_DEFAULTS,
            id="env_vars_other_than_out_dir__are_ignored",
        ),
        pytest.param(
            None,
            {},
            ["--alloc", "48/16", "--alloc", "60/4", "--selection-policy", "confidence"],
            make_settings_dict(
                alloc=[(48, 16), (60, 4)],
                selection_policy=SelectionPolicy.CONFIDENCE,
            ),
            id="cmdline__repeated_alloc_and_enum",
        ),
        pytest.param(
            {"max-edit-steps": "4"},
            {},
            ["--state-source", "rule-based-noise"],
            make_settings_dict(
                max_edit_steps=4, state_source=StateSource.RULE_BASED_NOISE
            ),
            id="config_file__dashed_keys_accepted",
        ),
        pytest.param(
            dict(optimizer="sgd", momentum="0.9", tabular_init_epochs="20"),
            {},
            ["--edit-target", "reference", "--learning-rate", "0.2"],
            make_settings_dict(
                optimizer=Optimizer.SGD,
                momentum=0.9,
                tabular_init_epochs=20,
                edit_target=EditTarget.REFERENCE,
                learning_rate=0.2,
            ),
            id="training_options__from_config_file_and_cmdline",
        ),
        pytest.param(
            dict(seed="3", not_supported="123"),
            {},
            [],
            ValidationError,
            id="config_file_unsupported_fields__raises_ValidationError",
        ),
        pytest.param(
            dict(budget="lots"),
            {},
            [],
            ValidationError,
            id="config_file_invalid_values__raises_ValidationError",
        ),
        pytest.param(
            dict(alloc="48-16"),
            {},
            [],
            ValidationError,
            id="config_file_invalid_alloc__raises_ValidationError",
        ),
    ],
)
def test_settings(
    config_settings,
    env_settings,
    cmdline_settings,
    expect,
    setup_editdiff_config,
    setup_env,
):  # pylint: disable=too-many-arguments
    config_file = (
        None if config_settings is None else setup_editdiff_config(config_settings)
    )
    setup_env(**env_settings)
    cmdl = ["eval"] + cmdline_settings
    if isinstance(expect, dict):
        settings = run_build_settings(cmdl, config_file)
        assert subset(settings, expect) == expect
    else:
        with pytest.raises(expect):
            run_build_settings(cmdl, config_file)


def test_settings__missing_config_file__uses_defaults(tmp_path):
    settings = run_build_settings(["eval"], tmp_path / "missing.conf")
    assert subset(settings, EXPECT_DEFAULTS) == EXPECT_DEFAULTS


def test_settings__malformed_config_line__raises_config_error(write_tmp_files):
    tmp_path = write_tmp_files(
        {
            "editdiff.conf": """\
                # a comment
                seed = 1
                this line has no equals sign
            """
        }
    )
    with pytest.raises(ConfigError, match=":3: expected 'key = value'"):
        run_build_settings(["eval"], tmp_path / "editdiff.conf")


def test_key_value_settings_source__comments_and_blanks__skipped():
    source = KeyValueSettingsSource(None)
    text = "\n# seed = 9\n  budget = 16  \nout = a=b.csv\n"
    assert source.parse(text) == {"budget": "16", "out": "a=b.csv"}
    assert source(Settings()) == {}


@pytest.mark.parametrize(
    "cmdline,config_verbosity,expect",
    [
        pytest.param([], None, 0, id="default"),
        pytest.param(["-vv"], None, 2, id="verbose_twice"),
        pytest.param(["-v", "-q"], None, 0, id="cancel_out"),
        pytest.param([], "1", 1, id="from_config"),
        pytest.param(["-q"], "1", -1, id="cmdline_overrides_config"),
    ],
)
def test_settings_create__verbose_and_quiet__combined_into_verbosity(
    setup_editdiff_config, cmdline, config_verbosity, expect
):
    config_file = None
    if config_verbosity is not None:
        config_file = setup_editdiff_config({"verbosity": config_verbosity})
    settings = run_build_settings(["train"] + cmdline, config_file)
    assert settings.verbosity == expect


def test_settings__assign_field__is_immutable():
    settings = run_build_settings(["eval"])
    with pytest.raises(TypeError):
        settings.seed = 1


@pytest.mark.parametrize(
    "arg,expect",
    [
        pytest.param("48/16", (48, 16), id="plain"),
        pytest.param("0/64", (0, 64), id="edit_only"),
    ],
)
def test_parse_allocation__valid__gives_pair(arg, expect):
    assert parse_allocation(arg) == expect
    assert format_allocation(expect) == arg


@pytest.mark.parametrize("arg", ["48", "a/b", "48/16/2", ""])
def test_parse_allocation__malformed__raises_argument_type_error(arg):
    with pytest.raises(argparse.ArgumentTypeError):
        parse_allocation(arg)


def test_build_parser__malformed_alloc__exits_with_usage_error():
    with pytest.raises(SystemExit) as exc_info:
        build_parser().parse_args(["eval", "--alloc", "48"])
    assert exc_info.value.code == 2


def test_resolve_output__relative_and_absolute__placed_under_out_dir(tmp_path):
    settings = run_build_settings(["eval", "--out-dir", str(tmp_path)])
    assert settings.resolve_output(None, "report.csv") == tmp_path / "report.csv"
    assert settings.resolve_output(Path("sub/r.json"), "x") == tmp_path / "sub/r.json"
    absolute = tmp_path / "elsewhere.csv"
    assert settings.resolve_output(absolute, "x") == absolute


def test_print_config__defaults__every_line_commented():
    out = io.StringIO()
    print_config(run_build_settings(["eval"]), out)
    lines = out.getvalue().splitlines()
    assert lines[0].startswith("# editdiff configuration")
    assert "# seed = 0" in lines
    assert "# selection_policy = random" in lines
    assert all(line.startswith("#") for line in lines)


def test_print_config__customized__reloads_to_same_settings(tmp_path):
    settings = run_build_settings(
        [
            "eval",
            "--seed=7",
            "--task=keyed-copy",
            "--alloc=48/16",
            "--alloc=32/32",
            "--record-timing",
        ]
    )
    out = io.StringIO()
    print_config(settings, out)
    text = out.getvalue()
    assert "seed = 7\n" in text
    assert "task = keyed-copy\n" in text
    assert "alloc = 48/16 32/32\n" in text
    assert "record_timing = true\n" in text

    config_file = tmp_path / "editdiff.conf"
    config_file.write_text(text)
    assert run_build_settings(["eval"], config_file) == settings
