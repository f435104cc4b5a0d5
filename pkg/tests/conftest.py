from __future__ import annotations

import pytest

_VERDICTS: list[str] = []


class Criterion:
    """Records one PASS/FAIL line per acceptance check, then asserts it."""

    def __init__(self):
        self.recorded = False

    def __call__(self, label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        _VERDICTS.append(line)
        print(line)
        self.recorded = True
        assert ok, line


@pytest.fixture
def criterion(request):
    c = Criterion()
    yield c
    if not c.recorded:
        _VERDICTS.append(f"FAIL  {request.node.name}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
