"""Collect the acceptance summary lines so they show up even when output is captured."""

_LINES = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _LINES.extend(line for line in report.capstdout.splitlines() if line.startswith("ACCEPTANCE"))


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
