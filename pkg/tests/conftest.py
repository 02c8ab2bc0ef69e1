from __future__ import annotations

import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, name, passed, detail)`` for the acceptance summary."""
    def record(k: int, name: str, passed: bool, detail: str = "") -> bool:
        _RESULTS[k] = (name, bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {k:2d} {name}: {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        name, ok, detail = _RESULTS[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d} {name}: {detail}")
