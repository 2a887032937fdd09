import time
from collections import defaultdict

import pytest

_outcomes: dict[int, list] = defaultdict(list)
_started: dict[str, float] = {}


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args[0] if mark else None


def pytest_runtest_setup(item):
    _started[item.nodeid] = time.perf_counter()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = _criterion(item)
    if n is None:
        return
    failed = rep.failed
    if rep.when == "call" or (failed and rep.when == "setup") or (rep.skipped and rep.when == "setup"):
        status = "FAIL" if failed else ("SKIP" if rep.skipped else "PASS")
        _outcomes[n].append((item.name, status, time.perf_counter() - _started.get(item.nodeid, 0.0)))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in sorted(_outcomes):
        rows = _outcomes[n]
        statuses = {s for _, s, _ in rows}
        verdict = "FAIL" if "FAIL" in statuses else ("SKIP" if statuses == {"SKIP"} else "PASS")
        seconds = sum(t for *_, t in rows)
        bad = [name for name, s, _ in rows if s == "FAIL"]
        detail = f" failing: {', '.join(bad)}" if bad else ""
        tr.write_line(f"criterion {n:>2}: {verdict}  ({len(rows)} checks, {seconds:.1f}s){detail}")
