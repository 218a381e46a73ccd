import pytest

_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or rep.failed:
        ok = rep.passed and _OUTCOMES.get(name, True)
        _OUTCOMES[name] = ok and not rep.skipped


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _OUTCOMES.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
