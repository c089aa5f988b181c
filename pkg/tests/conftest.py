from __future__ import annotations

import numpy as np
import pytest

from matforge.fixtures import write_fixtures, write_toy_library
from matforge.library import load_library


@pytest.fixture(scope="session")
def toy_library_dir(tmp_path_factory):
    return write_toy_library(tmp_path_factory.mktemp("lib") / "toy_library")


@pytest.fixture(scope="session")
def toy_index(toy_library_dir):
    return load_library(toy_library_dir)


@pytest.fixture
def fixtures_dir(tmp_path):
    write_fixtures(tmp_path)
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts are echoed here so they survive output capture
    from verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
