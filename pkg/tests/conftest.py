import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from multirel.model import EdgeCountPanel, HyperParams  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def footnote_hypers():
    return HyperParams(1.0, 2.0, 5.0, [1000.0, 4.0], [1e-4, 1.0],
                       [[800.0, 80.0], [200.0, 600.0]])


@pytest.fixture
def soft_hypers():
    """Two states with overlapping emissions so every configuration has mass."""
    return HyperParams(0.7, 2.0, 1.5, [3.0, 2.0], [0.4, 2.5], [[2.0, 1.0], [1.5, 2.5]])


def make_panel(counts):
    counts = np.asarray(counts)
    return EdgeCountPanel([(f"s{i}", f"t{i}") for i in range(counts.shape[0])], counts)


@pytest.fixture
def panel_factory():
    return make_panel


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
