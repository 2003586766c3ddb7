import pytest

_CRITERIA_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config.stash[_CRITERIA_KEY] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    results = item.config.stash[_CRITERIA_KEY]
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    _, prev_status, prev_details = results.get(number, (title, "PASS", []))
    rank = {"PASS": 0, "SKIP": 1, "FAIL": 2}
    worst = max(prev_status, status, key=rank.__getitem__)
    results[number] = (title, worst, prev_details + details)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_CRITERIA_KEY]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, details = results[number]
        line = f"[{status}] criterion {number}: {title}"
        if details:
            line += " | " + "; ".join(details)
        terminalreporter.write_line(line)
