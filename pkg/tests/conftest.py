import re

_CRITERIA = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+(?:\[\w+\])?)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = ""
        for name, content in report.sections:
            if "stdout" in name:
                lines = [ln for ln in content.splitlines() if ln.startswith("RESULT ")]
                detail = "; ".join(ln[len("RESULT "):] for ln in lines)
        _CRITERIA[key] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), (status, detail) in sorted(_CRITERIA.items()):
        line = f"criterion {num} ({name.replace('_', ' ')}): {status}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
