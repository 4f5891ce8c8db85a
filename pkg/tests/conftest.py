import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collector for the one-line-per-criterion acceptance verdicts."""

    def record(criterion, passed, detail):
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{criterion}] {status}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
