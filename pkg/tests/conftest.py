import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
