import _support


def pytest_terminal_summary(terminalreporter):
    if _support.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _support.ACCEPTANCE:
            terminalreporter.write_line(line)
