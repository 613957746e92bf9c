import pytest

from epshc.constructor import construct
from epshc.schedule import Params

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def default_c():
    return construct(Params())


@pytest.fixture(scope="session")
def small_c():
    # timeline under 10**4 and internal dimension 14, small enough for dense oracles
    return construct(Params(target_budget=40))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
