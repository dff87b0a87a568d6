import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the release-gate checklist after the run, outside capture."""
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None) if mod else None
    if not verdicts:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("release gate:")
    for label, ok in verdicts:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}")
