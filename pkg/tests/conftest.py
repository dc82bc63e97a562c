import numpy as np
import pytest

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    xfailed = hasattr(rep, "wasxfail")
    if mark is None or (rep.skipped and not xfailed):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if xfailed:
        detail = f"known failure: {detail}"
    ok, prev_detail = _VERDICTS.get(n, (title, True, ""))[1:]
    if rep.when == "call" or rep.failed:
        passed = rep.passed and not xfailed
        joined = "; ".join(d for d in (prev_detail, detail) if d)
        _VERDICTS[n] = (title, ok and passed, joined)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[n]
        line = f"criterion {n:>2}  {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
