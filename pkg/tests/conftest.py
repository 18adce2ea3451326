import pytest

CRITERIA = {
    1: "linear-driver oracle",
    2: "comparison ordering",
    3: "bound certificate",
    4: "Malliavin identification",
    5: "H-limit convergence",
    6: "PDIE cross-validation",
    7: "structural invariant suite",
}

_results: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _results.setdefault(n, []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in _results:
            continue
        status = "PASS" if all(_results[n]) else "FAIL"
        terminalreporter.write_line(f"{status} criterion {n}: {title} ({len(_results[n])} checks)")
