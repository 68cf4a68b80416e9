"""Acceptance criteria at their stated tolerances.

Run under pytest, or directly (python3 tests/test_acceptance.py) for one
PASS/FAIL line per criterion.
"""
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import CONSTANTS, HORIZON, M0_MEAN, M0_STD, ch_model, lq_model  # noqa: E402
from mfhjb.fields import VectorField  # noqa: E402
from mfhjb.fixedpoint import CONVERGED, flow_property_check, solve_mftc  # noqa: E402
from mfhjb.flow import (FlowMethod, MCParams, dual_expectation, flow_from_gradient,  # noqa: E402
                        girsanov_diagnostics, simulate_girsanov)
from mfhjb.hjb import majorant_checks, solve_hjb  # noqa: E402
from mfhjb.majorant import eta_function, eta_star, window_V  # noqa: E402
from mfhjb.measure import Grid1D, GridDensity, MeasureFlow, TimeMesh, moment_stderr, moments  # noqa: E402
from mfhjb.oracle import brute_force_dual, cole_hopf_value, lq_closed_form  # noqa: E402
from mfhjb.valuefn import (directional_derivative, master_residual, mc_cost,  # noqa: E402
                           perturbed_policy, random_perturbations, solve_vbar,
                           value_from_solution)

N_MC = 100_000
SEED = 7


def _grid(n=401):
    return Grid1D(-8.0, 8.0, n)


def _mesh(dt=1e-3, horizon=HORIZON):
    return TimeMesh.from_dt(*horizon, dt)


@lru_cache(maxsize=None)
def oracle():
    return lq_closed_form({}, HORIZON, M0_MEAN, a=1.0, m0_var=M0_STD ** 2)


@lru_cache(maxsize=None)
def solved(n=401, dt=1e-3):
    g, mesh = _grid(n), _mesh(dt)
    model = lq_model()
    m0 = GridDensity.gaussian(g, M0_MEAN, M0_STD)
    sol, flow, rep = solve_mftc(model, m0, mesh, g)
    if rep.verdict != CONVERGED:
        raise RuntimeError(f"LQ fixed point did not converge: {rep.verdict}")
    return model, m0, sol, flow, rep


# ---------------------------------------------------------------- criteria

def criterion_1():
    errs = []
    for n, dt in ((401, 1e-3), (801, 5e-4)):
        g, mesh = _grid(n), _mesh(dt)
        m = GridDensity.gaussian(g, 0.0, 1.0)
        sol = solve_hjb(ch_model(), MeasureFlow(mesh, [m] * (mesh.n_steps + 1)), mesh, g)
        core = g.core_mask(4.0)
        errs.append(float(np.max(np.abs(sol.V.values[0] - cole_hopf_value(1.0, 1.0, 0.5, g.nodes))[core])))
    ratio = errs[0] / errs[1]
    return errs[0] <= 2e-3 and ratio >= 1.8, f"error {errs[0]:.3e} (<= 2e-3), refinement ratio {ratio:.2f} (>= 1.8)"


def criterion_2():
    model, m0, sol, flow, rep = solved()
    cf, g = oracle(), sol.grid
    core = g.core_mask(4.0)
    c = np.polyfit(g.nodes[core], sol.V.values[0][core], 2)
    dP, dr, dk = abs(2 * c[0] - cf.P(0.0)), abs(c[1] - cf.r(0.0)), abs(c[2] - cf.k(0.0))
    dm = float(np.max(np.abs(flow.moments(1) - cf.mbar(sol.mesh.nodes))))
    ok = max(dP, dr, dk) <= 1e-3 and dm <= 2e-3
    return ok, f"|dP| {dP:.1e} |dr| {dr:.1e} |dk| {dk:.1e} (<= 1e-3), mean {dm:.1e} (<= 2e-3)"


def criterion_3():
    model, m0, sol, _, _ = solved()
    mc = MCParams(N_MC, SEED)
    fp = flow_from_gradient(model, sol.DV, m0)
    pa = flow_from_gradient(model, sol.DV, m0, FlowMethod.PARTICLE_SDE, mc)
    gi = flow_from_gradient(model, sol.DV, m0, FlowMethod.GIRSANOV_REWEIGHT, mc)
    worst = 0.0
    for r in range(pa.mesh.n_steps + 1):
        sl = (fp.slices[r * mc.record_every], pa.slices[r], gi.slices[r])
        for o in (1, 2):
            v = [moments(s, o) for s in sl]
            se = [moment_stderr(s, o) for s in sl]
            for i in range(3):
                for j in range(i + 1, 3):
                    worst = max(worst, abs(v[i] - v[j]) / (3 * np.hypot(se[i], se[j]) + 5e-3))
    return worst <= 1.0, f"worst pairwise gap / tolerance {worst:.3f} (<= 1)"


def criterion_4():
    model, m0, sol, _, _ = solved()
    fp = flow_from_gradient(model, sol.DV, m0)
    g = sol.grid
    worst_fp, worst_bf = 0.0, 0.0
    for k, phi in enumerate((lambda z: z, lambda z: z ** 2, np.cos)):
        for n in (250, 500):
            de = dual_expectation(model, sol.DV, phi, m0, n)
            worst_fp = max(worst_fp, abs(de - g.integrate(fp.slices[n].values * phi(g.nodes))))
        est, se = brute_force_dual(model, sol.DV, phi, m0, 500, N_MC, seed=SEED + k)
        worst_bf = max(worst_bf, abs(dual_expectation(model, sol.DV, phi, m0, 500) - est) / se)
    ok = worst_fp <= 5e-3 and worst_bf <= 3.0
    return ok, f"vs FP {worst_fp:.1e} (<= 5e-3), vs brute force {worst_bf:.2f} s.e. (<= 3)"


def criterion_5():
    model, m0, sol, _, _ = solved()
    d = girsanov_diagnostics(simulate_girsanov(model, sol.DV, m0, MCParams(N_MC, SEED)))
    z = abs(d["mean_M"][-1] - 1.0) / d["se_M"][-1]
    # E[M X^2] on a twice coarser time mesh with the same grid
    model2, m02, sol2, _, _ = solved(401, 2e-3)
    d2 = girsanov_diagnostics(simulate_girsanov(model2, sol2.DV, m02, MCParams(N_MC, SEED)))
    a, b = d["mean_MX2"][-1], d2["mean_MX2"][-1]
    tol = 3 * np.hypot(d["se_MX2"][-1], d2["se_MX2"][-1]) + 1e-2
    ok = z <= 3.0 and d["MX2_finite"] and abs(a - b) <= tol
    return ok, (f"mean M {d['mean_M'][-1]:.5f}, {z:.2f} s.e. (<= 3); E[M X^2] {a:.4f} vs {b:.4f} "
                f"on dt x2 (gap {abs(a - b):.1e} <= {tol:.1e})")


def criterion_6():
    horizon = (0.0, 0.15)
    g, mesh = _grid(), _mesh(1e-3, horizon)
    model = lq_model(horizon=horizon)
    sol, _, rep = solve_mftc(model, GridDensity.gaussian(g, M0_MEAN, M0_STD), mesh, g)
    chk = majorant_checks(model, sol)
    ok = rep.verdict == CONVERGED and chk["dominated"]
    return ok, f"margins V {chk['margin_V']:.3f}, DV {chk['margin_DV']:.3f} (<= 0), verdict {rep.verdict}"


def criterion_7():
    w = abs(window_V(1.0, 0.0, 1.0) - np.pi / 4)
    eta = eta_star()
    res = abs(float(eta_function(eta)))
    ok = w <= 1e-12 and res <= 1e-12 and 0.5 < eta < 1.0
    return ok, f"|window_V - pi/4| {w:.1e}, eta* {eta:.12f} residual {res:.1e}"


def criterion_8():
    model, m0, sol, flow, _ = solved()
    phi = value_from_solution(model, sol, flow).phi
    mc = MCParams(N_MC, SEED)
    J, se = mc_cost(model, sol.policy, m0, mc)
    ok = abs(J - phi) <= 3 * se + 1e-3
    worst = np.inf
    for a, f, p in random_perturbations(10, SEED):
        Jp, sp = mc_cost(model, perturbed_policy(sol.policy, a, f, p), m0, mc, mesh=sol.mesh)
        worst = min(worst, (Jp - phi + 3 * sp))
        ok &= Jp >= phi - 3 * sp
    return bool(ok), f"|J - Phi| {abs(J - phi):.1e} vs {3 * se + 1e-3:.1e}; min perturbed slack {worst:.1e} (>= 0)"


def criterion_9():
    model, m0, sol, flow, _ = solved()
    fd, pred = directional_derivative(model, sol, flow, lambda x: np.ones_like(x))
    return abs(fd - pred) <= 2e-3, f"finite difference {fd:.5f} vs int DV dm {pred:.5f} (gap {abs(fd - pred):.1e})"


def criterion_10():
    model, m0, sol, flow, _ = solved()
    gap = flow_property_check(model, sol, flow, sol.mesh.n_steps // 2)
    return gap <= 5e-3, f"restart discrepancy {gap:.1e} (<= 5e-3)"


def criterion_11():
    model, m0, sol, flow, _ = solved()
    vb = solve_vbar(model, sol, flow)
    cf = oracle()
    nodes = range(0, sol.mesh.n_steps + 1, 10)
    rho = max(abs(vb.bilinear_coefficient(n) - cf.rho(sol.mesh.nodes[n])) for n in nodes)
    sym = max(vb.symmetry_gap(n) for n in nodes)
    probes = [-2.0, -0.8, 0.0, 0.8, 2.0]
    res = []
    for n, dt in ((201, 2e-3), (401, 1e-3)):
        g = _grid(n)
        res.append(master_residual(lq_model(), GridDensity.gaussian(g, M0_MEAN, M0_STD), probes, dt).max_abs)
    ok = rho <= 5e-3 and sym <= 1e-2 and res[1] <= 0.05 and res[1] < res[0]
    return ok, (f"bilinear {rho:.1e} (<= 5e-3), symmetry {sym:.1e} (<= 1e-2), master {res[1]:.1e} "
                f"(<= 0.05, coarse {res[0]:.1e})")


def criterion_12():
    from mfhjb.cli import main
    import tempfile
    model, m0, sol, _, _ = solved()
    same = True
    ref = None
    for workers in (1, 4, 1):
        mc = MCParams(N_MC, SEED, workers=workers)
        pa = flow_from_gradient(model, sol.DV, m0, FlowMethod.PARTICLE_SDE, mc)
        b = simulate_girsanov(model, sol.DV, m0, mc)
        J = mc_cost(model, sol.policy, m0, mc)
        out = (pa.slices[-1].positions, b.positions, b.log_weights, np.array(J))
        if ref is None:
            ref = out
        else:
            same &= all(np.array_equal(x, y) for x, y in zip(ref, out))
    again = solve_mftc(model, m0, sol.mesh, sol.grid)[0]
    same &= np.array_equal(again.V.values, sol.V.values)
    cfg = ("seed = 5\n[model]\nhorizon = [0.0, 0.5]\n[model.family]\ntag = \"LQ_MEANFIELD\"\n"
           "[numerics.grid]\nn_points = 161\n[numerics.mesh]\ndt = 0.005\n[numerics.mc]\nn_particles = 20000\n")
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "run.toml"
        p.write_text(cfg)
        for w in ("1", "3"):
            main(["simulate", "--config", str(p), "--out-dir", f"{tmp}/w{w}", "--workers", w, "--format", "both"])
        files = [f.name for f in (Path(tmp) / "w1" / "simulate").iterdir() if f.name != "manifest.json"]
        same &= all((Path(tmp) / "w1" / "simulate" / f).read_bytes() ==
                    (Path(tmp) / "w3" / "simulate" / f).read_bytes() for f in files)
    return bool(same), "particles, Girsanov weights, MC cost, fixed point and CLI files identical across runs/workers"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9, criterion_10, criterion_11, criterion_12]


def _report(i, ok, detail):
    line = f"CRITERION {i:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    return line


@pytest.mark.parametrize("i", range(1, 13))
def test_criterion(i, capsys):
    ok, detail = CRITERIA[i - 1]()
    with capsys.disabled():
        print()
        _report(i, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for i, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        _report(i, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
