import re

_verdicts = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m or report.when not in ("setup", "call"):
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "setup" and report.passed:
        return
    detail = dict(report.user_properties).get("detail", "")
    _verdicts[key] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for (n, name), (verdict, detail) in sorted(_verdicts.items()):
        line = f"criterion {n} ({name.replace('_', ' ')}): {verdict}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
