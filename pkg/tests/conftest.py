import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; it is echoed in the terminal summary."""

    def record(number, name, passed, detail, soft=False):
        status = "PASS" if passed else ("SOFT-FAIL (reported only)" if soft else "FAIL")
        line = f"[{number:>2}] {status:<5} {name}: {detail}"
        _LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
