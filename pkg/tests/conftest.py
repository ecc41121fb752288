"""Shared pytest plumbing: acceptance-criterion summary lines.

``tests/test_acceptance.py`` registers one line per criterion; they are
echoed after the run so a plain ``pytest -v`` shows each criterion's
pass/fail verdict alongside the test outcomes.
"""

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    del exitstatus, config
    if not CRITERION_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in CRITERION_LINES:
        terminalreporter.write_line(line)
