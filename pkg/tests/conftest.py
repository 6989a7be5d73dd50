"""Collects one verdict line per acceptance criterion and prints them after the run."""

VERDICTS: dict[int, str] = {}


def record(number: int, passed: bool, title: str, detail: str) -> bool:
    VERDICTS[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(VERDICTS[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
