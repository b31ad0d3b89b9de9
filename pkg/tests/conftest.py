import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from bilevel_ot import DiscreteMeasure, Grid

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_weights(rng, m, mass=1.0, zeros=False):
    w = rng.random(m) + (0.0 if zeros else 0.05)
    if zeros:
        w[rng.random(m) < 0.3] = 0.0
        if w.sum() == 0:
            w[0] = 1.0
    return w * (mass / w.sum())


def random_measure(rng, grid, mass=1.0, zeros=False):
    return DiscreteMeasure(grid, random_weights(rng, grid.m, mass, zeros))


@st.composite
def seeds(draw):
    return draw(st.integers(min_value=0, max_value=2**31 - 1))


@pytest.fixture
def unit4():
    return Grid(0.0, 1.0, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
