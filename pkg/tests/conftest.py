import pathlib
import time

import pytest

from leakfix.lab import build_matrix, parse_grid
from leakfix.model import ModelConfig

DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def default_matrix():
    """The full 20x20 interaction matrix at 10 000 runs per pair, and its build time."""
    t0 = time.perf_counter()
    m = build_matrix(ModelConfig.default(), seed=0, n_runs=10_000)
    return m, time.perf_counter() - t0


@pytest.fixture(scope="session")
def expected_grid():
    return parse_grid((DATA / "table1_expected.txt").read_text())


_ACCEPTANCE = {}


@pytest.fixture
def accept():
    """record(n, ok, detail): one summary line per acceptance criterion."""
    def record(n, ok, detail):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")
