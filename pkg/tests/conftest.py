import pytest

# (criterion id, PASS/FAIL line) collected by the acceptance tests
ACCEPTANCE_LINES = []


def _criterion_key(item):
    ident = item[0]
    digits = "".join(ch for ch in ident if ch.isdigit())
    return int(digits), ident


@pytest.fixture
def acceptance():
    """Record one verdict line; returns ``passed`` so tests can assert on it."""

    def record(criterion: str, passed: bool, detail: str) -> bool:
        verdict = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append((criterion, f"[{verdict}] {criterion:<3} {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
        terminalreporter.write_line(line)
