import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail, seconds)``."""
    def record(n, ok, detail, seconds):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s]"
        _LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
