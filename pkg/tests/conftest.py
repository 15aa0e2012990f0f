import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(ok, detail)."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(ok, detail=""):
        _CRITERIA[n] = (bool(ok), detail)
        return ok
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    n = mark.args[0]
    if rep.failed and (n not in _CRITERIA or _CRITERIA[n][0]):
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        _CRITERIA[n] = (False, f"error: {msg[:160]}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
