import re

_CRITERIA: dict[int, tuple[str, str]] = {}
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.failed or (report.when == "call" and n not in _CRITERIA):
        _CRITERIA[n] = ("FAIL" if report.failed else "PASS", m.group(2).replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
