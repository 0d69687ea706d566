from pathlib import Path

import numpy as np
import pytest

from sdma import EstimateSet

DATA_DIR = Path(__file__).parent / "data"

# lines collected by test_acceptance and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def make_set(y, se, teams=None):
    return EstimateSet.from_arrays(y, se, teams=teams)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
