"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_results = {}


@pytest.fixture
def note(request):
    """Attach a criterion detail line to the running test's report."""
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        raise RuntimeError("the note fixture needs a criterion marker")
    number, title = marker.args
    request.node.user_properties += [("criterion", number), ("title", title)]

    def add(text):
        request.node.user_properties.append(("detail", text))
    return add


def pytest_runtest_logreport(report):
    props = report.user_properties
    keys = dict(props)
    if "criterion" not in keys:
        return
    if report.when == "call" or report.outcome != "passed":
        details = "; ".join(v for k, v in props if k == "detail")
        prev = _results.get(keys["criterion"])
        if prev is None or prev[0] == "passed":
            _results[keys["criterion"]] = (report.outcome, keys["title"], details)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        outcome, title, details = _results[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"{status}  {number:2d}  {title}"
        terminalreporter.write_line(f"{line}: {details}" if details else line)
