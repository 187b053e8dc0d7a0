import functools

import pytest

from paseig.driver import SolverConfig, prepare

ACCEPTANCE_LINES: list[str] = []


@functools.lru_cache(maxsize=None)
def cached_setup(problem="laplace2d", divisions=4, levels=3, eigenpairs=1, finest_steps=1):
    return prepare(SolverConfig(problem=problem, divisions=divisions, levels=levels,
                                eigenpairs=eigenpairs, finest_steps=finest_steps))


@pytest.fixture(scope="session")
def square4():
    """laplace2d, divisions 4, three levels."""
    return cached_setup()


@pytest.fixture(scope="session")
def square8():
    return cached_setup(divisions=8, levels=3, eigenpairs=5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
