import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one summary line per acceptance criterion."""
    def record(criterion, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {status}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running learning runs (opt in with CMUZERO_SLOW=1)")
