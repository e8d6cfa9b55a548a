import numpy as np
import pytest

from dptraj.grid import GridSpec, NeighborhoodSpec
from dptraj.toy import toy_grid


@pytest.fixture
def grid10():
    return toy_grid()


@pytest.fixture
def sf_grid():
    return GridSpec(37.6017, 37.8112, -122.5158, -122.3527, 500.0)


@pytest.fixture
def nb5():
    return NeighborhoodSpec(5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria lines, echoed live and again in the terminal summary
_criteria = []


@pytest.fixture
def report(pytestconfig):
    tr = pytestconfig.pluginmanager.getplugin("terminalreporter")

    def emit(n, ok, detail):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {n}: {status} {detail}"
        _criteria.append(line)
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria):
            terminalreporter.write_line(line)
