import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


_ACCEPTANCE_PREFIX = "ACCEPTANCE "


def pytest_runtest_logreport(report):
    if report.when == "call":
        lines = [ln for ln in report.capstdout.splitlines() if ln.startswith(_ACCEPTANCE_PREFIX)]
        if lines:
            _collected.extend(lines)


_collected: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _collected:
        terminalreporter.section("acceptance criteria")
        for line in _collected:
            terminalreporter.write_line(line[len(_ACCEPTANCE_PREFIX):])
