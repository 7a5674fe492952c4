import numpy as np
import pytest

from cavityrb.fom import FullOrderModel
from cavityrb.mesh import build_uniform_mesh
from cavityrb.spaces import TaylorHoodSpace


@pytest.fixture(scope="session")
def space4():
    return TaylorHoodSpace(build_uniform_mesh(4))


@pytest.fixture(scope="session")
def fom8():
    return FullOrderModel(8)


@pytest.fixture(scope="session")
def fom16():
    return FullOrderModel(16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Record one summary line per acceptance criterion (printed after the run)."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(label: str, passed: bool, detail: str) -> bool:
        lines.append(f"{label:<5} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s[2:5].strip())):
            terminalreporter.write_line(line)
