import numpy as np
import pytest

from finealign.core import TokenSet, l2_normalize

ACCEPTANCE_LINES = []


def unit_set(rng, l, d, mask=None):
    return l2_normalize(TokenSet.from_tokens(rng.standard_normal((l, d)), mask=mask))


def random_pair(rng, max_l=8, max_d=16, l1=None, l2=None, d=None):
    l1 = l1 or int(rng.integers(1, max_l + 1))
    l2 = l2 or int(rng.integers(1, max_l + 1))
    d = d or int(rng.integers(2, max_d + 1))
    return unit_set(rng, l1, d), unit_set(rng, l2, d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
