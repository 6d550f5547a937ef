import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedmerdel.data import CategoricalDataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def binary_toy():
    values = np.array([[0, 1], [1, 1], [0, 0], [1, 0]])
    return CategoricalDataset(values, [2, 2])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
