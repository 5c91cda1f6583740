import pytest

_criteria: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "acceptance" not in report.keywords:
        return
    doc = getattr(report, "criterion", None) or report.nodeid.split("::")[-1]
    _criteria.append(("PASS" if report.passed else "FAIL", doc))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker:
        report.criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for status, name in _criteria:
        terminalreporter.write_line(f"[{status}] {name}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion label")
