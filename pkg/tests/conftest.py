import numpy as np
import pytest
import torch

from binpick.heightmap import GridSpec
from binpick.primitives import BinBox, GripperModel, grid_for_bin

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def record_acceptance(number, name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def bb():
    return BinBox()


@pytest.fixture
def gm():
    return GripperModel()


@pytest.fixture
def spec(bb):
    return grid_for_bin(bb)


@pytest.fixture
def small_spec():
    return GridSpec(cell=0.005, height_px=8, width_px=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
