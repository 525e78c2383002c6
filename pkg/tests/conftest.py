"""Shared pytest plumbing: the acceptance-criteria report.

Acceptance tests register one line per criterion through ``record``; the
lines are replayed in the terminal summary so they stay visible even though
pytest captures per-test stdout.
"""

_LINES = []


def record(criterion, passed, detail):
    """Register a pass/fail line for one acceptance criterion and assert it.

    ``passed=None`` records an informational line (used for soft targets
    that cannot run on this machine) without asserting.
    """
    if passed is None:
        verdict = "NOT RUN"
    else:
        verdict = "PASS" if passed else "FAIL"
    _LINES.append(f"CRITERION {criterion}: {verdict} ({detail})")
    if passed is not None:
        assert passed, f"criterion {criterion} failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
