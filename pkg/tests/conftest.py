import numpy as np
import pytest

from stdet.numkit import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float64), **kw)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
