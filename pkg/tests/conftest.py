import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records the verdict line for acceptance criterion ``n``."""

    def record(n, passed, detail=""):
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
