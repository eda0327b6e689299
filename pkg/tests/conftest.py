"""Shared fixtures; collects acceptance-criterion verdict lines for the
terminal summary so each one is visible even when pytest captures stdout."""
import pytest

CRITERION_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Register one pass/fail line; it is printed and echoed at session end."""
    def _record(line: str) -> None:
        CRITERION_LINES.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
