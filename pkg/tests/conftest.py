VERDICTS = {}


def record_verdict(criterion, ok, detail):
    VERDICTS[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])
