import numpy as np
import pytest

from mfhjb.measure import Grid1D, GridDensity, TimeMesh
from mfhjb.model import AssumptionConstants, BuiltinFamily, build_model

CONSTANTS = AssumptionConstants(1.0, 1.0, 1.0, lam=0.5, gamma=4.0)
HORIZON = (0.0, 0.5)
M0_MEAN, M0_STD = 1.0, 0.5


def lq_model(horizon=HORIZON, params=None, constants=CONSTANTS):
    return build_model(BuiltinFamily("LQ_MEANFIELD", params or {}), horizon, 1.0, constants)


def ch_model(horizon=HORIZON, curvature=1.0):
    return build_model(BuiltinFamily("COLE_HOPF", {"curvature": curvature}), horizon, 1.0, CONSTANTS)


@pytest.fixture(scope="session")
def default_grid():
    return Grid1D(-8.0, 8.0, 401)


@pytest.fixture(scope="session")
def default_mesh():
    return TimeMesh.from_dt(*HORIZON, 1e-3)


@pytest.fixture(scope="session")
def small():
    """A coarse grid/mesh pair for fast unit tests."""
    g = Grid1D(-8.0, 8.0, 161)
    mesh = TimeMesh.from_dt(*HORIZON, 5e-3)
    return g, mesh, GridDensity.gaussian(g, M0_MEAN, M0_STD)


@pytest.fixture(scope="session")
def lq_oracle():
    from mfhjb.oracle import lq_closed_form
    return lq_closed_form({}, HORIZON, M0_MEAN, a=1.0, m0_var=M0_STD ** 2)


@pytest.fixture(scope="session")
def lq_solved(default_grid, default_mesh):
    """Converged LQ fixed point on the default mesh: (model, m0, sol, flow, report)."""
    from mfhjb.fixedpoint import solve_mftc
    model = lq_model()
    m0 = GridDensity.gaussian(default_grid, M0_MEAN, M0_STD)
    sol, flow, rep = solve_mftc(model, m0, default_mesh, default_grid)
    return model, m0, sol, flow, rep


@pytest.fixture(scope="session")
def small_solved(small):
    from mfhjb.fixedpoint import solve_mftc
    g, mesh, m0 = small
    model = lq_model()
    sol, flow, rep = solve_mftc(model, m0, mesh, g)
    return model, m0, sol, flow, rep
