"""Collects the one-line acceptance verdicts and repeats them after the run."""

CRITERIA: list[str] = []


def record_criterion(number, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
