"""Collects the one-line verdict of every acceptance criterion and prints them at the end."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
