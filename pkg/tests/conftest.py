import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_CRITERIA = range(1, 11)
_verdicts = {}


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _verdicts[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    ids = {r.nodeid for key in ("passed", "failed", "error", "skipped") for r in terminalreporter.stats.get(key, [])}
    ran = [n for n in ACCEPTANCE_CRITERIA if any(f"test_acceptance.py::test_c{n:02d}_" in i for i in ids)]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in ran:
        terminalreporter.write_line(_verdicts.get(n, f"FAIL criterion {n}: did not complete"))
