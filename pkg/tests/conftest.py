import sys


def pytest_terminal_summary(terminalreporter):
    # xfailed tests lose their captured stdout, so repeat every criterion line here
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "CRITERIA_LINES", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
