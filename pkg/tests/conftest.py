import pytest

from gasbody.dynamics import GridConfig, fixed_point_solve
from gasbody.force import ForceModel
from gasbody.kernel import InitialDensity, make_kernel
from gasbody.memory import MemoryConfig


@pytest.fixture(scope="session")
def gauss_model():
    return ForceModel(make_kernel("GaussFlux", {"beta": 1.0}), InitialDensity.gaussian(1.0), 0.0, 1.0, 0.95)


@pytest.fixture(scope="session")
def example_one(gauss_model):
    """Converged solve for the unit Gaussian kernel and gas, gamma = 0.05, d = 3."""
    return fixed_point_solve(gauss_model, MemoryConfig(depth=2), GridConfig(0.02, 400.0, 1.05))


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Per-criterion PASS/FAIL lines, printed in the terminal summary."""
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
