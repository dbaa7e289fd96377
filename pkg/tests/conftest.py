import sys
import time

import numpy as np
import pytest


def dkm_command(*args):
    return [sys.executable, "-m", "dtg.stub_dkm", *map(str, args)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self, number, title, limit):
        self.number, self.title, self.limit = number, title, limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        ok = exc_type is None and (self.limit is None or elapsed < self.limit)
        limit = f" (limit {self.limit:g} s)" if self.limit is not None else ""
        note = "" if exc_type is None else f": {exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {self.number:>2} {self.title} {elapsed:.2f} s{limit}{note}"
        _ACCEPTANCE.append(line)
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} took {elapsed:.2f} s, limit {self.limit} s")
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title, limit_seconds):`` records one pass/fail line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
