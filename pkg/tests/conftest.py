import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_couplings(rng, m, scale=1.0):
    j = np.triu(rng.normal(0.0, scale, (m, m)), 1)
    return j + j.T


ACCEPTANCE_LINES = []


def _criterion_key(line):
    num, tail = re.match(r"criterion (\d+)(\S*)", line).groups()
    return int(num), tail


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)
