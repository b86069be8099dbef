"""Shared pytest plumbing: acceptance criteria get one summary line each."""

import pytest

_CRITERIA = []


@pytest.fixture(scope="session")
def criterion_recorder():
    def record(name: str, passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _CRITERIA.append(line)
        print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
