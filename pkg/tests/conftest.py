import warnings

import pytest

from pilf.data import ColdNodeWarning, generate_synthetic

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def small_synthetic():
    """Noiseless 30x20 rank-2 matrix with every row and column populated."""
    return generate_synthetic(30, 20, 2, 0.5, 0.0, seed=3)


@pytest.fixture(scope="session")
def recovery_data():
    return generate_synthetic(200, 150, 3, 0.2, 0.0, seed=7)


@pytest.fixture
def quiet_cold_nodes():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ColdNodeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
