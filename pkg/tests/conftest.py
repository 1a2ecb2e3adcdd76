import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when != "call" and not (rep.failed or rep.skipped):
        return
    number, title = mark.args
    entry = item.config._criteria.setdefault(number, {"title": title, "results": []})
    detail = ""
    if rep.skipped and isinstance(rep.longrepr, tuple):
        detail = rep.longrepr[2]
    elif rep.failed:
        detail = str(rep.longrepr.reprcrash.message).splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
    entry["results"].append((rep.outcome, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crits = getattr(config, "_criteria", {})
    if not crits:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(crits):
        entry = crits[number]
        outcomes = [o for o, _ in entry["results"]]
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        notes = "; ".join(d for o, d in entry["results"] if d and o != "passed")
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
