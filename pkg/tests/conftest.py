import numpy as np
import pytest

from scalecl.params import ParamSet


def random_params(rng, shapes=(("fc0.weight", (3, 4)), ("fc0.bias", (3,)), ("head.weight", (2, 3)))):
    return ParamSet({k: rng.normal(size=s) for k, s in shapes})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
