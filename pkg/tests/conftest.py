"""Shared pytest plumbing for the acceptance gate.

Acceptance tests register one line per release criterion; the terminal
summary replays them after the normal pytest output so the verdicts stay
visible in a plain ``pytest`` run.
"""

_criterion_lines = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _criterion_lines[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_criterion_lines):
            terminalreporter.write_line(_criterion_lines[number])
