import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion; the test's outcome decides the status."""
    entry = {"name": request.node.name, "detail": ""}
    _CRITERIA[request.node.nodeid] = entry

    def note(label, detail):
        entry["name"], entry["detail"] = label, detail

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.nodeid in _CRITERIA and (rep.when == "call" or rep.failed):
        _CRITERIA[item.nodeid]["passed"] = rep.passed and _CRITERIA[item.nodeid].get("passed", True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for entry in _CRITERIA.values():
        status = "PASS" if entry.get("passed") else "FAIL"
        terminalreporter.write_line(f"[{status}] {entry['name']}: {entry['detail']}")
