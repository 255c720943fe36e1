import numpy as np
import pytest

from kvbeamwave.assembly import DampingCoefficient, ModelKind, assemble
from kvbeamwave.mesh import Geometry, build_grid

GEOM = Geometry(l=1.0, L=2.0, alpha=0.25, beta=0.75)


def make_op(model, n_left=16, n_right=16, damping=1.0, geom=GEOM, validation=False):
    grid = build_grid(geom, n_left, n_right)
    coeff = DampingCoefficient.constant(damping, (geom.alpha, geom.beta))
    return assemble(ModelKind(model), grid, coeff, validation=validation)


@pytest.fixture(params=list(ModelKind), ids=lambda m: m.value)
def model(request):
    return request.param


@pytest.fixture
def small_op(model):
    return make_op(model, 8, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
