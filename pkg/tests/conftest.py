import pytest

CRITERIA: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the verdict line for one acceptance criterion."""
    def _report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[n] = line
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
