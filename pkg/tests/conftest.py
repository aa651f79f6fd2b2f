import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config.stash[VERDICTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    line = f"{'PASS' if rep.passed else 'FAIL'} criterion {number:>2}: {title}"
    if detail:
        line += f" ({detail})"
    item.config.stash[VERDICTS].append((number, line))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(VERDICTS, [])
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(verdicts):
        terminalreporter.write_line(line)
