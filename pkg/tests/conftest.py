import pytest

from dkglab.bound_states import find_bound_state
from dkglab.grid import RadialGrid
from dkglab.spectrum import classify

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def grid2048():
    return RadialGrid(3, 40.0, 2048)


@pytest.fixture(scope="session")
def ground2048(grid2048):
    return find_bound_state(3.0, 3, 0, grid2048)


@pytest.fixture(scope="session")
def spec2048(ground2048):
    return classify(ground2048, 0.5)


@pytest.fixture(scope="session")
def excited2048(grid2048):
    return find_bound_state(3.0, 3, 1, grid2048)


@pytest.fixture(scope="session")
def ground4096():
    return find_bound_state(3.0, 3, 0, RadialGrid(3, 40.0, 4096))


@pytest.fixture(scope="session")
def spec4096(ground4096):
    return classify(ground4096, 0.5)


@pytest.fixture(scope="session")
def ground_p22():
    return find_bound_state(2.2, 3, 0, RadialGrid(3, 40.0, 4096))


@pytest.fixture(scope="session")
def spec_p22(ground_p22):
    return classify(ground_p22, 0.5)


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
