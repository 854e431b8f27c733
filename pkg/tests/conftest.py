import numpy as np
import pytest

from scoregraph.data import acceptance_dataset
from scoregraph.graph import token_table

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def dstar():
    return acceptance_dataset()


@pytest.fixture(scope="session")
def dstar_absorb():
    return acceptance_dataset(absorbing=True)


def data_distribution(ds):
    tab = token_table(ds.n, ds.spaces)
    return np.bincount(tab.index_of(*ds.token_arrays()), minlength=tab.size) / len(ds)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
