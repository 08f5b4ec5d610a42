"""Shared fixtures and the acceptance-criteria report."""

import pytest

_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion.

    Returns ``check(number, title, passed, detail)``, which stores the line,
    prints it and fails the calling test when ``passed`` is false.
    """

    def check(number, title, passed, detail=""):
        passed = bool(passed)
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _CRITERIA[str(number)] = line
        print(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abc")), k)):
        terminalreporter.write_line(_CRITERIA[key])
