"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the outcome of acceptance criterion ``n``."""

    def record(n: int, ok: bool, detail: str = "") -> bool:
        _RESULTS[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
