from __future__ import annotations

# (number, title, verdict, detail) rows collected by the acceptance suite
CRITERIA: list[tuple[int, str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"{verdict} criterion {number}: {title} ({detail})")
