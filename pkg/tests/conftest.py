import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or report.outcome != "passed":
        if report.skipped:
            status = "SKIP"
        else:
            status = "PASS" if report.passed else "FAIL"
        if report.when == "teardown" and number in _RESULTS and status == "PASS":
            return
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _RESULTS[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail = _RESULTS[number]
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
