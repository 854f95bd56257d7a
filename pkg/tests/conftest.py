import re

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_verdicts: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    number, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.failed:
        _verdicts[number] = (name, "FAIL")
    elif report.when == "call" and report.passed:
        _verdicts.setdefault(number, (name, "PASS"))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        name, verdict = _verdicts[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {name}")
