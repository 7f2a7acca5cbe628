import criteria


def pytest_terminal_summary(terminalreporter):
    if criteria.LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(criteria.LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
