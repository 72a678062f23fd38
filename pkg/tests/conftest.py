import numpy as np
import pytest
from hypothesis import settings

from nonlocality.model import Grid1D, Grid2D, SystemSpec

settings.register_profile("fast", max_examples=40, deadline=None)
settings.load_profile("fast")


@pytest.fixture
def grid1d():
    return Grid1D(128, 20.0)


@pytest.fixture
def small_grid():
    return Grid2D.square(64, 20.0)


@pytest.fixture
def spec():
    return SystemSpec()


@pytest.fixture
def free_spec():
    return SystemSpec(interaction_on=False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
