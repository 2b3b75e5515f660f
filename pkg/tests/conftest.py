import pytest

_verdicts = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    n = mark.args[0]
    ok = rep.passed or rep.skipped
    if rep.when == "call" or not ok:
        _verdicts[n] = _verdicts.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance")
    for n in sorted(_verdicts):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _verdicts[n] else 'FAIL'}")
