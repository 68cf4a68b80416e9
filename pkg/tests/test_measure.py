import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfhjb.errors import MeshMismatch, NonFiniteMap
from mfhjb.measure import (Grid1D, GridDensity, MeasureFlow, MeasureFunctional, ParticleEnsemble,
                           TimeMesh, chain_rule_check, moment_stderr, moments, pushforward,
                           sample_measure, wasserstein2_1d)


def test_grid_basics():
    g = Grid1D(-1.0, 1.0, 5)
    assert g.dx == pytest.approx(0.5)
    assert g.integrate(np.ones(5)) == pytest.approx(2.0)
    assert g.core_mask().sum() == 3
    assert list(g.index_of([-1.0, 0.5])) == [0, 3]
    with pytest.raises(MeshMismatch):
        g.index_of(0.3)
    with pytest.raises(ValueError):
        Grid1D(1.0, 0.0, 5)


def test_time_mesh():
    m = TimeMesh.from_dt(0.0, 0.5, 1e-3)
    assert m.n_steps == 500 and m.dt == pytest.approx(1e-3)
    assert m.coarsen(10).n_steps == 50
    assert m.tail(250).t == pytest.approx(0.25)
    assert m.head(100).T == pytest.approx(0.1)
    with pytest.raises(MeshMismatch):
        m.coarsen(7)


def test_gaussian_moments():
    g = Grid1D(-8, 8, 401)
    d = GridDensity.gaussian(g, 1.0, 0.5)
    assert d.mass() == pytest.approx(1.0, abs=1e-12)
    assert moments(d, 1) == pytest.approx(1.0, abs=1e-10)
    assert moments(d, 2) - 1.0 == pytest.approx(0.25, abs=1e-3)
    assert moment_stderr(d, 1) == 0.0


def test_density_rejects_bad_values():
    g = Grid1D(-1, 1, 5)
    with pytest.raises(ValueError):
        GridDensity(g, np.array([0, -1.0, 0, 0, 0]))
    with pytest.raises(ValueError):
        GridDensity(g, np.ones(4))


def test_particle_ensemble_weights():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros(3), np.array([0.5, 0.5, 0.5]))
    e = ParticleEnsemble.from_log_weights(np.arange(3.0), np.log([1.0, 1.0, 2.0]))
    assert e.weights.sum() == pytest.approx(1.0)
    assert e.ess() == pytest.approx(1 / (2 * 0.25 ** 2 + 0.5 ** 2))


def test_pushforward_rejects_nonfinite():
    e = ParticleEnsemble.uniform([0.0, 1.0])
    assert np.allclose(pushforward(e, lambda x: 2 * x).positions, [0.0, 2.0])
    with pytest.raises(NonFiniteMap):
        with np.errstate(divide="ignore", invalid="ignore"):
            pushforward(e, lambda x: x / 0.0)


def test_w2_of_shift():
    g = Grid1D(-8, 8, 801)
    a = GridDensity.gaussian(g, 0.0, 1.0)
    assert wasserstein2_1d(a, a.shifted(0.3)) == pytest.approx(0.3, abs=2e-3)
    e = ParticleEnsemble.uniform(sample_measure(a, 20000, seed=3))
    assert wasserstein2_1d(a, e) < 0.03


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(0.3, 1.5))
def test_w2_gaussians_property(m, s):
    g = Grid1D(-10, 10, 801)
    a = GridDensity.gaussian(g, 0.0, 1.0)
    b = GridDensity.gaussian(g, m, s)
    exact = np.sqrt(m ** 2 + (1 - s) ** 2)
    assert wasserstein2_1d(a, b) == pytest.approx(exact, abs=5e-3)
    assert wasserstein2_1d(a, b) == pytest.approx(wasserstein2_1d(b, a), abs=1e-12)


def test_sample_measure_is_worker_independent():
    g = Grid1D(-8, 8, 401)
    d = GridDensity.gaussian(g, 0.0, 1.0)
    x1 = sample_measure(d, 10000, seed=5, workers=1)
    x4 = sample_measure(d, 10000, seed=5, workers=4)
    assert np.array_equal(x1, x4)
    assert not np.array_equal(x1, sample_measure(d, 10000, seed=6))


def test_flow_requires_one_slice_per_node():
    g = Grid1D(-1, 1, 5)
    d = GridDensity.gaussian(g)
    with pytest.raises(MeshMismatch):
        MeasureFlow(TimeMesh(0, 1, 3), [d, d])


def test_chain_rule_on_heat_flow():
    from mfhjb.fields import VectorField
    from mfhjb.pde import solve_forward_fp
    from conftest import lq_model
    g = Grid1D(-8, 8, 321)
    mesh = TimeMesh.from_dt(0, 0.5, 2.5e-3)
    flow = solve_forward_fp(0.3, 1.0, mesh, g, GridDensity.gaussian(g, 0.0, 0.7))
    F = MeasureFunctional.linear(lambda x: x ** 2, lambda x: 2 * x, lambda x: 2 * np.ones_like(x))
    drift = VectorField(mesh, g, np.full((mesh.n_steps + 1, g.n_points), 0.3))
    assert chain_rule_check(lq_model(), F, flow, drift) < 5e-3
