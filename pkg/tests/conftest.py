"""Collects one summary line per acceptance criterion and prints them at the
end of the session, whether or not output capture is on."""
import pytest

_LINES: dict[int, str] = {}


class Report:
    def __call__(self, number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[number] = line
        print(line)
        return passed


@pytest.fixture(scope="session")
def report() -> Report:
    return Report()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
