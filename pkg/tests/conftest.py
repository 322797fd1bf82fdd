"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

_OUTCOMES: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture
def report(request):
    """Append measured numbers to the acceptance summary line of the current criterion."""
    notes = []
    request.node.user_properties.append(("notes", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed and not rep.skipped):
        return
    n, title = mark.args
    entry = _OUTCOMES.setdefault(n, {"title": title, "ok": True, "ran": False, "notes": []})
    entry["ran"] = entry["ran"] or rep.when == "call"
    if rep.failed or rep.skipped:
        entry["ok"] = False
    if rep.when == "call":
        for key, val in item.user_properties:
            if key == "notes":
                entry["notes"].extend(val)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        e = _OUTCOMES[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        tr.write_line(f"criterion {n:2d} {status}  {e['title']}{detail}")
