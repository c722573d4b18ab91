"""Shared pytest plumbing: the acceptance-criteria scoreboard.

Acceptance tests record one line per guarantee through
:func:`record_criterion`; the hook below replays the collected lines in a
dedicated section after the run so the verdicts stay visible even though
pytest captures per-test stdout.
"""

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    """Append (and print) a single ``criterion NN [PASS|FAIL]`` line."""
    verdict = "PASS" if ok else "FAIL"
    line = f"criterion {number:2d} [{verdict}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
