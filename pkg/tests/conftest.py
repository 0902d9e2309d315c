import warnings

import numpy as np
import pytest

from fedrouter.data import LoggedEvaluations
from fedrouter.ingestion import generate_synthetic, make_oracle

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_logged(rng, n, d, M, cost_max=1.0):
    return LoggedEvaluations(
        rng.standard_normal((n, d)),
        rng.integers(0, M, n),
        rng.random(n),
        rng.random(n) * cost_max,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_oracle():
    return make_oracle(6, 4, 4, seed=7)


@pytest.fixture(scope="session")
def small_table(small_oracle):
    table, _ = generate_synthetic(small_oracle, 1200, seed=8)
    return table


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield
