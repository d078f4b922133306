"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` roll up into one PASS/FAIL line each."""

import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed or (rep.when == "setup" and rep.skipped):
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(f"{status} criterion {number}: {e['title']}" + (f" ({detail})" if detail else ""))
