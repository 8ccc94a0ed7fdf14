import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import report  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if report.LINES:
        terminalreporter.section("acceptance criteria")
        for text in report.LINES:
            terminalreporter.write_line(text)
