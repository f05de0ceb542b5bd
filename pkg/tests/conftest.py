import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    n = marker.args[0]
    failed = report.failed
    if report.when == "call" or failed:
        prev = _RESULTS.get(n, (True, []))
        detail = getattr(item, "acceptance_detail", "")
        _RESULTS[n] = (prev[0] and not failed, prev[1] + ([detail] if detail else []))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, details = _RESULTS[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  (" + "; ".join(details) + ")"
        terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Attach a short measured-value summary to the acceptance line of this test."""
    def _report(text):
        prev = getattr(request.node, "acceptance_detail", "")
        request.node.acceptance_detail = f"{prev}, {text}" if prev else text
    return _report
