import os

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.register_profile("thorough", deadline=None, max_examples=1000)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        state = "PASS" if report.outcome == "passed" else report.outcome.upper()
        if state == "FAILED":
            state = "FAIL"
        _RESULTS[number] = (title, state, report.duration)
        line = f"criterion {number:>2} {state:<4} {title} ({report.duration:.1f} s)"
        print(f"\n{line}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, state, duration = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2} {state:<4} {title} ({duration:.1f} s)")
