"""Shared test plumbing: the acceptance scorecard.

Acceptance tests append one PASS/FAIL line each; the terminal-summary hook
prints them after the run, outside pytest's output capture.
"""

SCORECARD: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if SCORECARD:
        terminalreporter.ensure_newline()
        terminalreporter.section("acceptance scorecard", sep="-")
        for line in SCORECARD:
            terminalreporter.line(line)
