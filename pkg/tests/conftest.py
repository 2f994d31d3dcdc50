import numpy as np
import pytest

from condsmc.model import build_model, m2_model


@pytest.fixture
def m2():
    return m2_model(1)


@pytest.fixture
def flat2():
    """Two states, G = 1 everywhere, horizon 1."""
    return build_model({
        "num_states": 2,
        "horizon": 1,
        "m0": [0.3, 0.7],
        "q": [[0.6, 0.4], [0.25, 0.75]],
        "potentials": [1.0, 1.0],
        "constant": True,
    })


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
