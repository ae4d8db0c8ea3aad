"""Shared pytest wiring.

The acceptance gate registers one summary line per criterion as it
runs; emitting them from the terminal-summary hook keeps them visible
in the normal (captured) pytest output.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
