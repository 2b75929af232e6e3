import pytest

# lines recorded by the acceptance suite, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record a criterion outcome, print it, and fail the test if it did not hold."""
    def record(number, title, ok, detail="", gating=True):
        status = "PASS" if ok else ("FAIL" if gating else "FAIL (non-gating)")
        line = f"[{status}] criterion {number}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if gating:
            assert ok, line
    return record
