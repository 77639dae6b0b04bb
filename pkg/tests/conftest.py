"""Shared pytest config: prints one PASS/FAIL line per acceptance criterion.

The acceptance suite (test_acceptance.py) names its tests
``test_criterion_NN_*``; after any run that included them, the terminal
summary lists each criterion's outcome on its own line so the gate can be
read without scanning the full pytest output.
"""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[int, str] = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            num = int(m.group(1))
            if status == "passed" and rep.when != "call":
                continue  # setup/teardown success is not the verdict
            if status == "passed":
                outcomes.setdefault(num, "PASS")
            else:
                outcomes[num] = "FAIL"
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(outcomes):
        terminalreporter.write_line(f"[criterion {num}] {outcomes[num]}")
