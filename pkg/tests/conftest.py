"""Shared fixtures plus a visible pass/fail line per acceptance criterion."""

import numpy as np
import pytest

from speechqa import synth

_acceptance_results = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance.py" in report.nodeid:
        _acceptance_results[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for nodeid, outcome in sorted(_acceptance_results.items()):
        name = nodeid.split("::")[-1]
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  [{tag}] {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def clean_2s(rng):
    """A 2-second speech-like buffer with silence and voiced bursts."""
    return synth.generate_clean(2.0, rng)
