import pytest

_RESULTS: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one acceptance line."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS.append((n, bool(ok), line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(line)
