import re

_AC = re.compile(r"test_acceptance\.py::test_(ac\d+)_")
_outcomes = {}


def pytest_runtest_logreport(report):
    m = _AC.search(report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    if report.when == "call" or report.outcome != "passed":
        if _outcomes.get(key) != "FAIL":
            _outcomes[key] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes, key=lambda k: int(k[2:])):
        terminalreporter.write_line(f"{key}: {_outcomes[key]}")
