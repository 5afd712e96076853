import numpy as np
import pytest

from batchpool import dgp
from batchpool import variance as var


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def homoskedastic():
    return dgp.DGPSpec(dim=1, var_kind="homoskedastic")


@pytest.fixture
def heteroskedastic():
    return dgp.DGPSpec(dim=1, var_kind="heteroskedastic")


@pytest.fixture(scope="session")
def gauss_sample():
    return var.gauss_legendre_sample()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
