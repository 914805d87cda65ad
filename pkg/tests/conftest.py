import pytest
from hypothesis import settings

# compiled kernels make first calls slow, and timings vary on a shared core
settings.register_profile("default", deadline=None)
settings.load_profile("default")

_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; call with (criterion, passed, detail)."""

    def add(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in _LINES:
            terminalreporter.write_line(line)
