import numpy as np
import pytest
import torch

from mtlab.datakit import generate_phantoms

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cr_small():
    return generate_phantoms(12, "CR", 5, size=32)


@pytest.fixture(scope="session")
def sr_small():
    return generate_phantoms(6, "SR", 5, size=32)


@pytest.fixture(scope="session")
def dr_small():
    return generate_phantoms(6, "DR", 5, size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
