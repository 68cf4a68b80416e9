import ast
from pathlib import Path

import numpy as np
import pytest

import mfhjb.oracle as oracle
from mfhjb.errors import KernelOverflow
from mfhjb.oracle import ColeHopfOracle, cole_hopf_value, lq_closed_form


def test_oracle_imports_no_solvers():
    tree = ast.parse(Path(oracle.__file__).read_text())
    mods = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            mods.add(node.module or "")
        elif isinstance(node, ast.Import):
            mods.update(a.name for a in node.names)
    banned = {"pde", "hjb", "fixedpoint", "flow", "valuefn"}
    assert not {m.split(".")[-1] for m in mods} & banned


def test_cole_hopf_quadrature_matches_closed_form():
    orc = ColeHopfOracle(1.0, 1.0, 0.5)
    x = np.linspace(-4, 4, 17)
    assert np.max(np.abs(orc.value(0.0, x) - cole_hopf_value(1.0, 1.0, 0.5, x))) < 1e-10
    assert np.allclose(orc.value(0.5, x), 0.5 * x ** 2)


def test_cole_hopf_pde_residual():
    orc = ColeHopfOracle(2.0, 0.5, 1.0)
    assert np.max(np.abs(orc.pde_residual(0.3, np.linspace(-3, 3, 13)))) < 1e-7


def test_cole_hopf_nonquadratic_terminal():
    # h = |x| has no closed form but the quadrature must still satisfy the PDE
    orc = ColeHopfOracle(1.0, 1.0, 1.0, terminal=lambda x: np.sqrt(1 + np.asarray(x) ** 2))
    assert np.max(np.abs(orc.pde_residual(0.2, np.linspace(-2, 2, 9)))) < 1e-6


def test_kernel_overflow():
    orc = ColeHopfOracle(1.0, 1e-4, 1.0, terminal=lambda x: -np.asarray(x) ** 2)
    with pytest.raises(KernelOverflow):
        orc.value(0.0, np.array([10.0]))


def test_riccati_closed_form(lq_oracle):
    s = np.linspace(0, 0.5, 11)
    assert np.allclose(lq_oracle.P(s), 1.0 / (1.0 + (0.5 - s)), atol=1e-10)
    assert lq_oracle.r(0.5) == pytest.approx(lq_oracle.mbar(0.5), abs=1e-10)
    assert lq_oracle.mbar(0.0) == pytest.approx(1.0, abs=1e-12)
    assert lq_oracle.ode_residuals() < 1e-9


def test_lq_decoupled_limit():
    cf = lq_closed_form({"q_bar": 0.0, "q_bar_T": 0.0}, (0.0, 1.0), 1.0, m0_var=0.25)
    s = np.linspace(0, 1, 6)
    assert np.allclose(cf.r(s), 0.0, atol=1e-10)
    # with r = 0 the mean is m0 (1 + T - s)/(1 + T) along dm/ds = -P m
    assert np.allclose(cf.mbar(s), (1 + 1 - s) / 2, atol=1e-9)
    # value = E[V(0,X0)] with V = P x^2/2 + a/2 ln(1 + T - s)
    assert cf.phi() == pytest.approx(0.25 * (1.25) + 0.5 * np.log(2.0), abs=1e-9)


def test_lq_value_derivative_consistency(lq_oracle):
    eps = 1e-4
    up = lq_closed_form({}, (0.0, 0.5), 1.0 + eps, m0_var=0.25).phi()
    dn = lq_closed_form({}, (0.0, 0.5), 1.0 - eps, m0_var=0.25).phi()
    assert (up - dn) / (2 * eps) == pytest.approx(lq_oracle.dphi_dmean(), abs=1e-6)
