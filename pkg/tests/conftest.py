import pytest

_OUTCOMES = {}
_NOTES = {}
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): numbered acceptance criterion")


@pytest.fixture
def note(request):
    """Attach a measured value to the current test's acceptance summary line."""
    def _note(msg):
        _NOTES.setdefault(request.node.nodeid, []).append(str(msg))
    return _note


def pytest_collection_finish(session):
    for item in session.items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[item.nodeid] = m.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    if report.when == "call" or report.outcome != "passed":
        # a setup/teardown failure overrides a passing call
        if _OUTCOMES.get(report.nodeid) != "failed":
            _OUTCOMES[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    rows = []
    for nodeid, (n, text) in _CRITERIA.items():
        if nodeid not in _OUTCOMES:
            continue
        detail = "; ".join(_NOTES.get(nodeid, []))
        line = f"{label[_OUTCOMES[nodeid]]} criterion {n}: {text}" + (f" [{detail}]" if detail else "")
        rows.append((n, line))
    for _, line in sorted(rows, key=lambda r: r[0]):
        tr.write_line(line)
