import numpy as np
import pytest
from hypothesis import settings

from gatedhmoe.model import Activation, MixingMeasure, ModelSpec, Variant, load_true_measure
from gatedhmoe.voronoi import QuadratureGrid

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

SIGMOID = Activation.sigmoid(0.5)
ALL_SPECS = [ModelSpec(v, SIGMOID) for v in Variant]


@pytest.fixture(scope="session")
def truth():
    return load_true_measure()


@pytest.fixture(scope="session")
def grid():
    return QuadratureGrid.uniform(2)


def random_measure(rng, H=2, N=2, K=3, d=2, scale=1.0, pinned=True):
    M = rng.normal(scale=scale, size=(H, N, d, d))
    M = 0.5 * (M + M.swapaxes(-1, -2))
    if pinned:
        M[:, -1] = 0.0
    return MixingMeasure(rng.normal(size=(H, K)), M, rng.normal(scale=scale, size=(H, N, K, d)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
