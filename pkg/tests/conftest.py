from holfree.core import Sample, make_chain
from holfree.runtime import VirtualRuntime


def run_virtual(*gens):
    """Run generator processes to completion on a fresh virtual runtime."""
    rt = VirtualRuntime()
    procs = [rt.spawn(g) for g in gens]
    rt.run()
    return rt, procs


def chain_of(*costs, factor=1):
    return make_chain([(f"t{i}", factor, c) for i, c in enumerate(costs)])


def sample_of(sid, *costs, size=100):
    return Sample(sid, size, chain_of(*costs))


# ------------------------------------------------------------ acceptance summary

import pytest

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test contributes to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "passed": 0, "failed": []})
    if rep.failed:
        entry["failed"].append(item.name)
    elif rep.when == "call" and rep.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        verdict = "FAIL" if e["failed"] else "PASS"
        detail = f" (failed: {', '.join(e['failed'])})" if e["failed"] else ""
        tr.write_line(f"criterion {n:>2} {verdict}  {e['title']}  [{e['passed']} checks passed]{detail}")
