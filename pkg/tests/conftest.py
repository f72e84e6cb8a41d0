import numpy as np
import pytest

from dro_rum.shocks import sample_gumbel

U = np.array([0.0, 1.0, 2.0, 2.1])
U_TILDE = np.array([0.0, 1.0, 2.0, 2.2])

# lines collected by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def gumbel_1m():
    return sample_gumbel(1_000_000, 4, seed=20240611)


@pytest.fixture(scope="session")
def gumbel_2m():
    return sample_gumbel(2_000_000, 4, seed=31415)


@pytest.fixture(scope="session")
def gumbel_100k():
    return sample_gumbel(100_000, 4, seed=7)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
