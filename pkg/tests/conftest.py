"""Shared pytest hooks: one PASS/FAIL line per acceptance criterion."""
import re

_CRITERIA: dict[int, tuple[str, str]] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    number, name = int(m.group(1)), m.group(2).replace("_", " ")
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        previous = _CRITERIA.get(number, (name, "PASS"))[1]
        status = "FAIL" if failed or previous == "FAIL" else "PASS"
        _CRITERIA[number] = (name, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name}")
