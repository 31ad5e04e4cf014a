import re

import pytest

_LINES = {}
_RAN = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, title, ok, detail)``."""

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
        _LINES[number] = line
        print(line)
        return ok

    return record


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if m and report.when == "call":
        _RAN[int(m.group(1))] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _RAN:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RAN):
        line = _LINES.get(k, f"[FAIL] criterion {k:2d}: did not complete ({_RAN[k]})")
        terminalreporter.write_line(line)
