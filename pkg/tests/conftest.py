import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one criterion outcome; fails the test when ``ok`` is false."""

    def record(criterion, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
