import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one status line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        _LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
