"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        if "criterion" not in props:
            return
        n = props["criterion"]
        if report.passed:
            status = "PASS"
        elif report.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        _RESULTS[n] = (status, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        line = f"criterion {n} {status}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
