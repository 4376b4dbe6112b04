import numpy as np
import pytest

from salab import MarkovModel, StationaryPolicy
from salab.td import AffineFamily

TD_M = np.diag([-1.0, -2.0])
TD_B = np.array([[1.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
TD_P = np.array([[0.5, 0.3, 0.2], [0.2, 0.6, 0.2], [0.3, 0.3, 0.4]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def td_family():
    return AffineFamily.constant(TD_M, TD_B)


@pytest.fixture
def td_chain():
    return MarkovModel.uncontrolled(TD_P)


@pytest.fixture
def td_policy():
    return StationaryPolicy.uniform(3, 1)


def random_hurwitz(rng, d):
    """Random Hurwitz matrix: a random matrix shifted left past its spectral abscissa."""
    A = rng.standard_normal((d, d))
    shift = np.max(np.linalg.eigvals(A).real) + rng.uniform(0.2, 1.5)
    return A - shift * np.eye(d)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
