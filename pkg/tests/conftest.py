import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from admmguard import LinkingConstraint, QuadraticProblem  # noqa: E402


@pytest.fixture
def one_d():
    """min x^2 + z^2 subject to x - z = 0."""
    link = LinkingConstraint(np.array([[1.0]]), np.array([[-1.0]]), np.zeros(1))
    return QuadraticProblem(np.eye(1), np.zeros(1), np.eye(1), np.zeros(1), link)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
