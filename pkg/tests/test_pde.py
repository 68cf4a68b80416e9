import numpy as np
import pytest

from mfhjb.errors import GrowthViolation, MassLeak, MeshMismatch
from mfhjb.fields import grad_nodes, grad_nodes_T, second_diff
from mfhjb.measure import Grid1D, GridDensity, TimeMesh, moments
from mfhjb.pde import (BC_NEUMANN, LinearPDECoefficients, green_rows, solve_backward_linear,
                       solve_forward_fp, tabulate_green)

G = Grid1D(-8.0, 8.0, 161)
MESH = TimeMesh.from_dt(0.0, 0.5, 5e-3)


def test_grad_stencils_exact_on_quadratics():
    x = G.nodes
    v = 3 * x ** 2 - x + 2
    assert np.allclose(grad_nodes(v, G.dx), 6 * x - 1, atol=1e-10)
    assert np.allclose(second_diff(v, G.dx)[1:-1], 6.0, atol=1e-8)


def test_grad_transpose():
    rng = np.random.default_rng(0)
    u, w = rng.normal(size=G.n_points), rng.normal(size=G.n_points)
    assert np.dot(grad_nodes(u, G.dx), w) == pytest.approx(np.dot(u, grad_nodes_T(w, G.dx)), rel=1e-12)


def test_heat_backward_quadratic():
    # -J_s - (1/2) J_xx = 0, J(T) = x^2  ->  J(s) = x^2 + (T - s)
    J = solve_backward_linear(LinearPDECoefficients(terminal=lambda x: x ** 2), 1.0, MESH, G)
    assert np.max(np.abs(J.values[0] - (G.nodes ** 2 + 0.5))) < 1e-8


def test_transport_backward_linear():
    # -J_s - (1/2) J_xx - g J_x = l with g = 1, l = 1, J(T) = x: J = x + 2 (T - s)
    J = solve_backward_linear(LinearPDECoefficients(drift=1.0, source=1.0, terminal=lambda x: x),
                              1.0, MESH, G)
    core = G.core_mask()
    assert np.max(np.abs(J.values[0, core] - (G.nodes[core] + 1.0))) < 1e-8


def test_growth_violation():
    with pytest.raises(GrowthViolation):
        solve_backward_linear(LinearPDECoefficients(source=lambda s, x: np.exp(np.abs(x))), 1.0,
                              MESH, G, growth_bound=1.0)


def test_fp_mass_and_moments():
    m0 = GridDensity.gaussian(G, 0.0, 0.7)
    flow = solve_forward_fp(0.4, 1.0, MESH, G, m0)
    mass = np.array([s.mass() for s in flow.slices])
    assert np.max(np.abs(mass - 1.0)) < 1e-12
    s = MESH.nodes
    assert np.max(np.abs(flow.moments(1) - 0.4 * s)) < 1e-3
    var = flow.moments(2) - flow.moments(1) ** 2
    assert np.max(np.abs(var - (0.49 + s))) < 2e-3


def test_fp_leak_detected():
    g = Grid1D(-2.0, 2.0, 81)
    with pytest.raises(MassLeak):
        solve_forward_fp(5.0, 1.0, TimeMesh(0.0, 1.0, 100), g, GridDensity.gaussian(g, 0.0, 0.3))


def test_fp_grid_mismatch():
    with pytest.raises(MeshMismatch):
        solve_forward_fp(None, 1.0, MESH, G, GridDensity.gaussian(Grid1D(-1, 1, 11)))


def test_green_rows_match_backward_table():
    drift = lambda s, x: -0.5 * x
    z = np.array([60, 80, 100])
    rows = green_rows(drift, 1.0, MESH, G, z)
    for k in (10, 50, 100):
        tab = tabulate_green(drift, 1.0, MESH, G, k)
        assert np.allclose(rows[k], tab.values[0][z], rtol=1e-9, atol=1e-12)


def test_green_is_a_probability_kernel():
    rows = green_rows(0.3, 1.0, MESH, G, [80])
    mass = G.integrate(rows[-1, 0])
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert G.integrate(rows[-1, 0] * G.nodes) == pytest.approx(0.3 * 0.5, abs=1e-3)


def test_neumann_bc_runs():
    J = solve_backward_linear(LinearPDECoefficients(terminal=lambda x: np.cos(x)), 1.0, MESH, G,
                              bc=BC_NEUMANN)
    core = G.core_mask(3.0)
    assert np.max(np.abs(J.values[0, core] - np.exp(-0.25) * np.cos(G.nodes[core]))) < 1e-3
