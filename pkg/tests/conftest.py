"""Shared pytest wiring: acceptance-criterion summary lines."""

from __future__ import annotations


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results: dict[str, str] = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and getattr(
                report, "when", "call"
            ) == "call":
                results[nodeid.split("::")[-1]] = status
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(results):
        label = name.removeprefix("test_criterion_").replace("_", " ")
        verdict = "PASS" if results[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {label}")
