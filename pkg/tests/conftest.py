"""Fixtures for tests"""
from pathlib import Path
from textwrap import dedent
from typing import Dict

import pytest

from editdiff.models import TabularModel, fit_tabular
from editdiff.tasks import THREE_SUMS, Task, make_task


@pytest.fixture
def write_tmp_files(tmp_path: Path):
    def _inner(file_contents: Dict[str, str]) -> Path:
        for filename, contents in file_contents.items():
            path = tmp_path / filename
            assert path.relative_to(tmp_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(dedent(contents))
        return tmp_path

    return _inner


@pytest.fixture
def three_sums() -> Task:
    """calc | 2 + 2 = 4, calc | 2 + 3 = 5 and calc | 3 + 2 = 5."""
    return make_task(THREE_SUMS)


@pytest.fixture
def three_sums_model(three_sums) -> TabularModel:
    return fit_tabular(three_sums.corpus, three_sums.vocab)


@pytest.fixture
def setup_editdiff_config(write_tmp_files):
    """Write a key = value configuration file with the given directives."""

    def _inner(contents: Dict[str, str]) -> Path:
        text = "".join(f"{key} = {value}\n" for key, value in contents.items())
        tmp_path = write_tmp_files({"editdiff.conf": text})
        return tmp_path / "editdiff.conf"

    return _inner


@pytest.fixture(autouse=True)
def reset_settings_config_file():
    """Restore the Settings.config_file class variable between tests."""
    from editdiff.settings import Settings  # pylint: disable=C0415

    saved = Settings.config_file
    yield
    Settings.config_file = saved
