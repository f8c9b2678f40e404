import time
from contextlib import contextmanager

import pytest

ACCEPTANCE_LINES = []


@contextmanager
def criterion(name, budget_s):
    """Time a block, enforce its runtime budget, and record a PASS/FAIL line."""
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        within = elapsed < budget_s
        status = "PASS" if ok and within else "FAIL"
        ACCEPTANCE_LINES.append(f"{status}  {name}  ({elapsed:.2f}s / budget {budget_s:g}s)")
    assert within, f"{name}: {elapsed:.2f}s exceeds the {budget_s}s budget"


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
