import pytest

_LINES: list[str] = []


class Recorder:
    """One pass/fail line per acceptance criterion, plus free-form notes."""

    def __call__(self, number: int, passed: bool, detail: str) -> bool:
        self._emit(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    def note(self, text: str) -> None:
        self._emit(f"    {text}")

    @staticmethod
    def _emit(line: str) -> None:
        _LINES.append(line)
        print(line)


@pytest.fixture
def criterion():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
