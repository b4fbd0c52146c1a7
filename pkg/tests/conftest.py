"""Collects acceptance verdicts and prints one line per criterion at the end."""
import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture()
def verdict():
    def record(criterion: str, passed: bool, detail: str = ""):
        ACCEPTANCE[criterion] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
