import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """``criterion(number, title, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
