import pytest

_VERDICTS: dict[int, tuple[bool, str, str]] = {}


class Verdicts:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(self, number: int, title: str, passed: bool, detail: str) -> bool:
        _VERDICTS[number] = (passed, title, detail)
        return passed


@pytest.fixture(scope="session")
def verdicts() -> Verdicts:
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        passed, title, detail = _VERDICTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
