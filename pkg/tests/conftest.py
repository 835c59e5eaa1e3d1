import contextlib

import numpy as np
import pytest

from corrtest.model import StudyData

WORKED = [[9, 7, 23, 20, 34], [7, 5, 13, 19, 36]]
# retinitis pigmentosa families, bilateral only
RP = [[15, 6, 7, 0, 0], [7, 5, 9, 0, 0], [3, 2, 14, 0, 0], [67, 24, 57, 0, 0]]

_ACCEPTANCE = {}


@pytest.fixture
def worked():
    return StudyData.from_array(WORKED, labels=("A", "B"))


@pytest.fixture
def rp():
    return StudyData.from_array(RP, labels=("DOM", "AR", "SL", "ISO"))


def random_study(rng, g=None, size=(20, 80), R=None, unilateral=True):
    """A study simulated from random feasible parameters."""
    from corrtest.simulation import generate_study

    g = g or int(rng.integers(2, 6))
    pi = rng.uniform(0.15, 0.75, size=g)
    if R is None:
        low = max(0.6, float(np.max((2 * pi - 1) / pi**2)) + 0.02)
        R = rng.uniform(low, min(1.0 / pi.max(), 2.5))
    m = rng.integers(*size, size=g)
    n = rng.integers(*size, size=g) if unilateral else np.zeros(g, dtype=int)
    return generate_study(m, n, pi, R, rng), pi, R


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion for the terminal summary."""

    @contextlib.contextmanager
    def record(number, description):
        detail = {}
        try:
            yield detail
        except BaseException:
            _ACCEPTANCE[number] = ("FAIL", description, detail.get("info", ""))
            print(f"ACCEPTANCE {number}: FAIL - {description} {detail.get('info', '')}")
            raise
        _ACCEPTANCE[number] = ("PASS", description, detail.get("info", ""))
        print(f"ACCEPTANCE {number}: PASS - {description} {detail.get('info', '')}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, description, info = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status} - {description} {info}".rstrip())
