import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion and return it."""

    def record(number, ok, detail):
        _CRITERIA[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
