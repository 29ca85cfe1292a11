import pytest

_outcomes = {}
_notes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the criterion summary."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _notes.setdefault(marker.args[0], []).append(str(text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, [title, True, 0])
    if report.when == "call" or report.failed:
        entry[2] += report.when == "call"
        entry[1] = entry[1] and not report.failed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        title, ok, count = _outcomes[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        if _notes.get(number):
            line += "  [" + "; ".join(_notes[number]) + "]"
        terminalreporter.write_line(line)
