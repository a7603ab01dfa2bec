_CRITERIA: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _CRITERIA.extend(value for key, value in report.user_properties if key == "criterion")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
