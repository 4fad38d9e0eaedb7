from __future__ import annotations

import json

import pytest

from cputs.cli import main

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    """Store one acceptance verdict for the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def table1_report(tmp_path_factory):
    """Location shift, linear model, n_P=2000, 200 replications, run through the CLI."""
    out = tmp_path_factory.mktemp("table1") / "report.json"
    code = main(["simulate", "--shift", "location", "--model", "linear", "--np", "2000",
                 "--reps", "200", "--methods", "cputs,cpp", "--seed", "0", "--out", str(out)])
    assert code == 0
    return json.loads(out.read_text())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
