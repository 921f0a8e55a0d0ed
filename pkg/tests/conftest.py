import numpy as np
import pytest

from fracblowup import grid as gr
from fracblowup.ground import solve_ground_state
from fracblowup.profile import build_profiles

# lines collected by the acceptance module, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def g2():
    return gr.make_grid(64.0, 4096)


@pytest.fixture(scope="session")
def gs2(g2):
    return solve_ground_state(2.0, g2)


@pytest.fixture(scope="session")
def ps2(gs2):
    return build_profiles(gs2)


@pytest.fixture(scope="session")
def gs19():
    return solve_ground_state(1.9, gr.make_grid(200.0, 2**14))


@pytest.fixture(scope="session")
def ps19(gs19):
    return build_profiles(gs19)


def q_exact(y):
    """Closed-form ground state at beta = 2."""
    return (3.0 * gr.sech(2.0 * y) ** 2) ** 0.25


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
