import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mfhjb.errors import InfeasibleHorizon
from mfhjb.majorant import (eta_function, eta_star, feasibility_windows, majorant_fields,
                            majorant_params, window_DV, window_V)
from mfhjb.measure import Grid1D, TimeMesh
from mfhjb.model import AssumptionConstants


def test_window_pi_over_four():
    assert abs(window_V(1.0, 0.0, 1.0) - np.pi / 4) <= 1e-12


def test_eta_star():
    eta = eta_star()
    assert 0.5 < eta < 1.0
    assert abs(eta_function(eta)) <= 1e-12
    with pytest.raises(ValueError):
        eta_star(0.0)


def test_window_is_riccati_blowup_time():
    # d beta / d tau = delta beta^2 + 4c from beta = 4 c_T blows up after window_V
    c, cT, d = 1.3, 0.4, 0.7
    w = window_V(c, cT, d)

    def rhs(tau, b):
        return [d * b[0] ** 2 + 4 * c]
    hit = lambda tau, b: b[0] - 1e8
    hit.terminal = True
    sol = solve_ivp(rhs, (0, 2 * w), [4 * cT], events=hit, rtol=1e-12, atol=1e-12)
    assert sol.t_events[0][0] == pytest.approx(w, rel=1e-6)


def test_majorant_solves_riccati():
    k = AssumptionConstants(1.0, 1.0, 1.0, lam=0.5)
    mp = majorant_params(k, (0.0, 0.15))
    assert mp.feasible_V and mp.feasible_DV
    s = np.linspace(0.0, 0.149, 9)
    h = 1e-6
    db = (mp.beta(s + h) - mp.beta(s - h)) / (2 * h)
    assert np.allclose(db, -(k.delta * mp.beta(s) ** 2 + 4 * k.c), rtol=1e-5)
    assert mp.beta(0.15) == pytest.approx(4 * k.c_T)
    assert mp.mu_bar(0.15) >= 0


def test_infeasible_horizon():
    k = AssumptionConstants(1.0, 1.0, 1.0)
    _, wDV = feasibility_windows(k)
    with pytest.raises(InfeasibleHorizon):
        majorant_fields(k, (0.0, 1.1 * wDV), Grid1D(-4, 4, 41))
    assert window_DV(1.0, 1.0) == pytest.approx(wDV)


def test_fields_shapes():
    k = AssumptionConstants(1.0, 1.0, 1.0)
    g = Grid1D(-4, 4, 41)
    mesh = TimeMesh(0.0, 0.1, 10)
    z, zb = majorant_fields(k, (0.0, 0.1), g, mesh=mesh)
    assert z.values.shape == (11, 41) and np.all(zb.values >= 0)
