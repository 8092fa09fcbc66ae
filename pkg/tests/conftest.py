import pytest

_RESULTS: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test if the check did not hold."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        _RESULTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance")
        for line in _RESULTS:
            terminalreporter.write_line(line)
