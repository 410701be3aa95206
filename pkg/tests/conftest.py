import numpy as np
import pytest
from hypothesis import settings

from proxmed.simulation import DgpConfig, generate

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def sim7():
    """Default mechanism, n = 2000, seed 7."""
    data, _ = generate(DgpConfig(), 2000, 7)
    return data


@pytest.fixture(scope="session")
def big():
    """Default mechanism, n = 100000, seed 1."""
    data, _ = generate(DgpConfig(), 100_000, 1)
    return data


def small_dataset(seed: int, n: int = 300):
    data, _ = generate(DgpConfig(), n, seed)
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, shown at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
