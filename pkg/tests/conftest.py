import pytest

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and not rep.failed:
        return
    passed = rep.passed and rep.when == "call"
    if not passed and rep.longrepr is not None:
        reason = getattr(rep.longrepr, "reprcrash", None)
        reason = reason.message.splitlines()[0] if reason else rep.longreprtext.strip().splitlines()[-1]
        detail = "; ".join(d for d in (detail, reason[:160]) if d)
    # a criterion may span several tests; any failure marks it failed
    prev = _RESULTS.get(n)
    ok = passed and (prev is None or prev[1])
    details = [d for d in ((prev[2] if prev else ""), detail) if d]
    _RESULTS[n] = (title, ok, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n} [{title}]: {'PASS' if ok else 'FAIL'}  {detail}")
