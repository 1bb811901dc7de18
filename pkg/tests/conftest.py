import numpy as np
import pytest

from awe import tensor as T

_ACCEPTANCE: list[str] = []


@pytest.fixture(autouse=True)
def _finite_checks():
    prev = T.set_check_finite(True)
    yield
    T.set_check_finite(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
