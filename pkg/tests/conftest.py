import numpy as np
import pytest

from sfseg.segmodel import ArchConfig, init_model


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end experiment")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return init_model(ArchConfig(n_classes=3, widths=[4, 4]), seed=3)


@pytest.fixture(scope="session")
def benchmark_7():
    from .pipeline import benchmark

    return benchmark(7)


@pytest.fixture(scope="session")
def source_model_7():
    from .pipeline import source_model

    return source_model(7)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
