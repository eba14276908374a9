"""Shared pytest hooks.

Tests marked ``@pytest.mark.criterion(n, "title")`` are grouped per
acceptance criterion and summarized as one PASS/FAIL line each at the end
of the run.
"""
import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion gate")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            entry = _criteria.setdefault(number, {"title": title, "items": {}, "details": []})
            entry["items"][item.nodeid] = None


@pytest.fixture
def criterion_detail(request):
    """Attach a short measured-value note to this test's criterion line."""
    mark = request.node.get_closest_marker("criterion")

    def record(text):
        _criteria[mark.args[0]]["details"].append(text)

    return record


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["items"]:
            if report.failed:
                entry["items"][report.nodeid] = "failed"
            elif report.skipped:
                entry["items"][report.nodeid] = entry["items"][report.nodeid] or "skipped"
            elif report.when == "call" and entry["items"][report.nodeid] is None:
                entry["items"][report.nodeid] = "passed"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        states = list(entry["items"].values())
        if all(s == "passed" for s in states):
            verdict = "PASS"
        elif any(s == "failed" for s in states):
            verdict = "FAIL"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {entry['title']}")
        for text in entry["details"]:
            terminalreporter.write_line(f"    {text}")
