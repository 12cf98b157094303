import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Store and print the one-line verdict of an acceptance criterion."""
    def record(number: int, checks: list[tuple[str, bool, str]]) -> bool:
        ok = all(c[1] for c in checks)
        detail = "; ".join(f"{name} {'ok' if good else 'FAIL'} ({info})"
                           for name, good, info in checks)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} -- {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
