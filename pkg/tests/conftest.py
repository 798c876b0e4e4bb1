from fractions import Fraction as F

import pytest

from rbmdual.model import RbmSpec

SPEC_SKEW = RbmSpec((-1.0, -1.0), ((1.0, 0.0), (0.0, 1.0)), ((1.0, 0.0), (0.0, 1.0)))
SPEC_GEN = RbmSpec((-1.0, -1.0), ((1.0, 0.2), (0.2, 1.0)), ((1.0, 0.5), (-0.3, 1.0)))
SPEC_1D = RbmSpec((-1.0,), ((1.0,),), ((1.0,),))

# exact rational versions for the rate-table identities
SPEC_SKEW_Q = RbmSpec((F(-1), F(-1)), ((F(1), F(0)), (F(0), F(1))), ((F(1), F(0)), (F(0), F(1))))
SPEC_GEN_Q = RbmSpec((F(-1), F(-1)), ((F(1), F(1, 5)), (F(1, 5), F(1))),
                     ((F(1), F(1, 2)), (F(-3, 10), F(1))))

ACCEPTANCE_LINES = []


@pytest.fixture
def skew():
    return SPEC_SKEW


@pytest.fixture
def gen():
    return SPEC_GEN


@pytest.fixture
def one_d():
    return SPEC_1D


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
