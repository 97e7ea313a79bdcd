import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = "test_acceptance.py::test_criterion_"


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured detail."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if ACCEPTANCE not in nodeid or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split(ACCEPTANCE)[1]
            num, _, label = name.partition("_")
            detail = "; ".join(str(v) for k, v in getattr(rep, "user_properties", []) if k == "detail")
            status = "PASS" if outcome == "passed" else "FAIL"
            lines.append((int(num), f"{status} criterion {int(num):2d} {label.replace('_', ' ')}"
                                    + (f": {detail}" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
