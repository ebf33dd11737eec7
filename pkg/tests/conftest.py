import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(name): top-level acceptance criterion; each gets one "
        "pass/fail line in the terminal summary")
    config._criterion_lines = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    lines = item.config._criterion_lines
    if report.when == "call":
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        lines.append(f"{status}: {name}")
    elif report.when == "setup" and (report.skipped or report.failed):
        status = "SKIP" if report.skipped else "FAIL"
        lines.append(f"{status}: {name}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
