import numpy as np
import pytest

from meanfield_mdp import RngSpec, exact_flow, replicate, two_state_example

ACCEPTANCE_LINES = []

SEED = 20240611
GRID = (100, 1000, 10000)
R_BIG = 10_000


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report_line():
    def record(number, passed, detail):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


@pytest.fixture(scope="session")
def running():
    """The two-point running model up to time 1."""
    return two_state_example(horizon=1)


@pytest.fixture(scope="session")
def running_flow(running):
    return exact_flow(running)


@pytest.fixture(scope="session")
def rng():
    return RngSpec(SEED)


@pytest.fixture(scope="session")
def big_batches(running, rng):
    """R = 10^4 replications of the running model at each N of the grid."""
    return {N: replicate(running, N, R_BIG, rng) for N in GRID}


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)
