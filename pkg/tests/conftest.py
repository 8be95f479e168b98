import numpy as np
import pytest

from wmevo.model import init_genome


@pytest.fixture(scope="session")
def genome():
    return init_genome(7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: test_acceptance.py records one line per criterion
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
