import sys

import numpy as np
import pytest

from abmlora.models import MLP


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    model = MLP.random(6, [8, 7], 3, "relu", seed=3)
    model.attach_adapters(rank=2, alpha=4.0, scheme="gaussian", seed=5)
    return model


@pytest.fixture
def batch(rng):
    return rng.normal(size=(10, 6)), rng.integers(0, 3, size=10)


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    report = getattr(module, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(report.items()):
            terminalreporter.write_line(line)
        for line in getattr(module, "INFO", []):
            terminalreporter.write_line(line)
