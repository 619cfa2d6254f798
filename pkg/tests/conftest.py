import numpy as np
import pytest

from matstein.matcore import SymPD, random_sympd

_CRITERIA = {}


def record(criterion, ok, detail=""):
    """Store the outcome of one acceptance criterion (printed in the terminal summary)."""
    prev = _CRITERIA.get(criterion)
    ok = bool(ok) and (prev is None or prev[0])
    parts = [p for p in ((prev[1] if prev else ""), detail) if p]
    _CRITERIA[criterion] = (ok, "; ".join(parts))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scales(rng):
    return random_sympd(2, rng), random_sympd(3, rng)


@pytest.fixture
def eye2():
    return SymPD.identity(2)
