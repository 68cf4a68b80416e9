"""Command-line experiment runner.

    mfhjb SUBCOMMAND --config run.toml [--out-dir DIR] [--seed N]
          [--set key.path=value ...] [--workers N] [--format csv|binary|both]

Exit status: 0 success, 1 solver verdict or downstream failure, 2 config error.
"""
from __future__ import annotations

import argparse
import platform
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, build, load_config
from .errors import ConfigError, MfhjbError

SUBCOMMANDS = ("audit", "solve", "validate", "simulate", "value", "verify", "derivative", "master")
PROBE_X = (-2.0, -0.8, 0.0, 0.8, 2.0)


class Context:
    def __init__(self, cfg: RunConfig, out: Path, fmt: str, workers):
        self.cfg = cfg
        self.out = out
        self.fmt = fmt
        self.workers = workers
        self.model, self.grid, self.mesh, self.m0, self.fp, mc = build(cfg)
        self.mc = replace(mc, workers=workers)
        self.fp = replace(self.fp, mc=self.mc)
        self.lines = []

    def say(self, text=""):
        print(text)
        self.lines.append(text)

    def solve(self):
        from .fixedpoint import solve_mftc
        return solve_mftc(self.model, self.m0, self.mesh, self.grid, self.fp)

    def export_solution(self, sol, flow):
        for name, vals in (("V", sol.V.values), ("DV", sol.DV.values), ("policy", sol.policy.values)):
            io.write_block(self.out / name, vals, self.mesh, self.grid, self.fmt)
        if flow is not None and flow.representation == "grid":
            io.write_block(self.out / "density", flow.density_array(), self.mesh, self.grid, self.fmt)
        io.write_json(self.out / "diagnostics.json", sol.diagnostics)


def _is_lq(model):
    return model.family.tag == "LQ_MEANFIELD"


def _oracle(ctx):
    from .oracle import lq_closed_form
    ini = ctx.cfg["initial"]
    return lq_closed_form(ctx.model.family.params, ctx.model.horizon, float(ini["mean"]),
                          a=ctx.model.a_scalar, m0_var=float(ini["std"]) ** 2)


def _table(ctx, name, rows):
    """rows: (check, value, tolerance, passed)."""
    ctx.say(f"{'check':<34}{'value':>14}{'tolerance':>12}  result")
    for r in rows:
        ctx.say(f"{r[0]:<34}{r[1]:>14.6g}{r[2]:>12.3g}  {'PASS' if r[3] else 'FAIL'}")
    io.write_table(ctx.out / name, ["check", "value", "tolerance", "result"],
                   [(r[0], float(r[1]), float(r[2]), "PASS" if r[3] else "FAIL") for r in rows])
    return all(r[3] for r in rows)


def _fail_report(ctx, rep):
    ctx.say(f"verdict: {rep.verdict} after {rep.iterations} iterations {rep.message}".rstrip())
    io.write_json(ctx.out / "report.json", rep.as_dict())
    return 1


# ---------------------------------------------------------------- subcommands

def cmd_audit(ctx):
    from .majorant import eta_function, eta_star, feasibility_windows, majorant_params
    from .model import audit_assumptions
    k = ctx.model.constants
    eta = eta_star()
    wV, wDV = feasibility_windows(k)
    length = ctx.model.T - ctx.model.t
    ctx.say(f"window_V   = {wV:.10g}")
    ctx.say(f"window_DV  = {wDV:.10g}")
    ctx.say(f"eta_star   = {eta:.15g}  (residual {float(eta_function(eta)):.2e})")
    ctx.say(f"horizon    = {length:.6g}  feasible_V={length < wV} feasible_DV={length < wDV}")
    mp = majorant_params(k, ctx.model.horizon, ctx.model.trace_a)
    rows = []
    if mp.feasible_V:
        s = np.linspace(ctx.model.t, ctx.model.T, 11)
        bb = mp.beta_bar(s) if mp.feasible_DV else np.full(s.size, np.nan)
        mb = mp.mu_bar(s) if mp.feasible_DV else np.full(s.size, np.nan)
        ctx.say(f"{'s':>10}{'beta':>14}{'mu':>14}{'beta_bar':>14}{'mu_bar':>14}")
        for i in range(s.size):
            ctx.say(f"{s[i]:>10.4f}{mp.beta(s[i]):>14.6g}{mp.mu(s[i]):>14.6g}{bb[i]:>14.6g}{mb[i]:>14.6g}")
            rows.append((s[i], float(mp.beta(s[i])), float(mp.mu(s[i])), bb[i], mb[i]))
        io.write_table(ctx.out / "majorant.csv", ["s", "beta", "mu", "beta_bar", "mu_bar"], rows)
    rep = audit_assumptions(ctx.model)
    ctx.say(f"{'condition':<22}{'ratio':>12}  result")
    for key, r in sorted(rep.ratios.items()):
        ctx.say(f"{key:<22}{r:>12.4g}  {'PASS' if r <= 1 + 1e-12 else 'FAIL'}")
    for key, v in sorted(rep.compatibility.items()):
        ctx.say(f"{key:<22}{v:>12.4g}  {'PASS' if v <= 1e-10 else 'FAIL'}")
    for key, v in sorted(rep.convexity.items()):
        ctx.say(f"{key:<22}{str(v):>12}  {'PASS' if v else 'FAIL'}")
    io.write_json(ctx.out / "audit.json", {"window_V": wV, "window_DV": wDV, "eta_star": eta,
                                          "audit": rep.as_dict(), "majorant": mp.as_dict()})
    return 0


def cmd_solve(ctx):
    sol, flow, rep = ctx.solve()
    if rep.majorant_flag and not rep.convex_regime:
        ctx.say("warning: horizon outside the feasibility windows; no convexity flag")
    with open(ctx.out / "report.txt", "w") as fh:
        for r in rep.history:
            fh.write(" ".join(f"{k}={v!r}" for k, v in r.as_dict().items()) + "\n")
    io.write_json(ctx.out / "report.json", rep.as_dict())
    if sol is not None:
        ctx.export_solution(sol, flow)
    ctx.say(f"verdict: {rep.verdict} after {rep.iterations} iterations")
    for r in rep.history[-3:]:
        ctx.say(f"  iter {r.iteration}: weighted {r.res_weighted:.3e}  core max {r.res_max_core:.3e}"
                f"  W2 {r.w2:.3e}")
    return 0 if rep.verdict == "CONVERGED" else 1


def cmd_validate(ctx):
    from .hjb import solve_hjb
    from .majorant import eta_function, eta_star, window_V
    from .model import BuiltinFamily, build_model
    from .oracle import ColeHopfOracle, cole_hopf_value
    from .pde import solve_forward_fp
    rows = []
    m, g, mesh = ctx.model, ctx.grid, ctx.mesh
    core = g.core_mask(4.0)
    rows.append(("window_V(1,0,1) - pi/4", abs(window_V(1.0, 0.0, 1.0) - np.pi / 4), 1e-12,
                 abs(window_V(1.0, 0.0, 1.0) - np.pi / 4) <= 1e-12))
    eta = eta_star()
    rows.append(("eta_star residual", abs(float(eta_function(eta))), 1e-12,
                 abs(float(eta_function(eta))) <= 1e-12 and 0.5 < eta < 1.0))
    kappa = m.family.get("curvature", 1.0) if m.family.tag == "COLE_HOPF" else 1.0
    ch = build_model(BuiltinFamily("COLE_HOPF", {"curvature": kappa}), m.horizon, m.sigma_scalar,
                     m.constants)
    flow0 = solve_forward_fp(None, ch.sigma, mesh, g, ctx.m0)
    sol = solve_hjb(ch, flow0, mesh, g, ctx.fp.bc, ctx.fp.hamiltonian)
    err = float(np.max(np.abs(sol.V.values[0] - cole_hopf_value(kappa, m.a_scalar, m.T - m.t, g.nodes))[core]))
    rows.append(("Cole-Hopf max error on [-4,4]", err, 2e-3, err <= 2e-3))
    orc = ColeHopfOracle(kappa, m.a_scalar, m.T)
    res = float(np.max(np.abs(orc.pde_residual(0.5 * (m.t + m.T), np.linspace(-3, 3, 13)))))
    rows.append(("Cole-Hopf oracle PDE residual", res, 1e-8, res <= 1e-8))
    if _is_lq(m):
        cf = _oracle(ctx)
        rows.append(("LQ oracle ODE residual", cf.ode_residuals(), 1e-10, cf.ode_residuals() <= 1e-10))
        solv, flow, rep = ctx.solve()
        if solv is None:
            return _fail_report(ctx, rep)
        c = np.polyfit(g.nodes[core], solv.V.values[0][core], 2)
        for lab, num, ref in (("P(t)", 2 * c[0], cf.P(m.t)), ("r(t)", c[1], cf.r(m.t)),
                              ("k(t)", c[2], cf.k(m.t))):
            rows.append((f"LQ {lab} fit vs oracle", abs(num - ref), 1e-3, abs(num - ref) <= 1e-3))
        dm = float(np.max(np.abs(flow.moments(1) - cf.mbar(mesh.nodes))))
        rows.append(("LQ flow mean vs oracle", dm, 2e-3, dm <= 2e-3))
    ok = _table(ctx, "validate.csv", rows)
    return 0 if ok else 1


def cmd_simulate(ctx):
    from .flow import (FlowMethod, flow_from_gradient, girsanov_diagnostics, simulate_girsanov)
    from .measure import moment_stderr, moments
    sol, fp_flow, rep = ctx.solve()
    if sol is None:
        return _fail_report(ctx, rep)
    mc = ctx.mc
    pa = flow_from_gradient(ctx.model, sol.DV, ctx.m0, FlowMethod.PARTICLE_SDE, mc)
    batch = simulate_girsanov(ctx.model, sol.DV, ctx.m0, mc)
    gi = flow_from_gradient(ctx.model, sol.DV, ctx.m0, FlowMethod.GIRSANOV_REWEIGHT, mc)
    rows, worst = [], 0.0
    for r in range(pa.mesh.n_steps + 1):
        n = r * mc.record_every
        row = [float(pa.mesh.nodes[r])]
        for o in (1, 2):
            sl = (fp_flow.slices[n], pa.slices[r], gi.slices[r])
            vals = [moments(s, o) for s in sl]
            ses = [moment_stderr(s, o) for s in sl]
            for i in range(3):
                for j in range(i + 1, 3):
                    tol = 3 * np.hypot(ses[i], ses[j]) + 5e-3
                    worst = max(worst, abs(vals[i] - vals[j]) / tol)
            row += vals + ses[1:]
        rows.append(row)
    cols = ["s"] + [f"{k}_{o}" for o in (1, 2) for k in ("fp", "particle", "girsanov", "se_particle", "se_girsanov")]
    io.write_table(ctx.out / "moments.csv", cols, rows)
    diag = girsanov_diagnostics(batch)
    io.write_json(ctx.out / "girsanov.json", diag)
    ctx.say(f"tri-method agreement: worst ratio to tolerance {worst:.3f}")
    ctx.say(f"mean M at T: {diag['mean_M'][-1]:.6f} +- {diag['se_M'][-1]:.2e}; "
            f"E[M X^2] at T: {diag['mean_MX2'][-1]:.6g}")
    ok = worst <= 1.0 and diag["martingale_ok"]
    return 0 if ok else 1


def cmd_value(ctx):
    from .valuefn import value_from_solution
    sol, flow, rep = ctx.solve()
    if sol is None:
        return _fail_report(ctx, rep)
    vr = value_from_solution(ctx.model, sol, flow)
    out = vr.as_dict()
    ctx.say(f"Phi(t, m0) = {vr.phi:.10g}  (running {vr.running_integral:.6g}, terminal {vr.terminal:.6g})")
    code = 0
    if _is_lq(ctx.model):
        ref = _oracle(ctx).phi()
        out["oracle_phi"] = ref
        ctx.say(f"oracle     = {ref:.10g}  diff {vr.phi - ref:.3e}")
        code = 0 if abs(vr.phi - ref) <= 1e-3 else 1
    io.write_table(ctx.out / "running.csv", ["s", "running"], zip(ctx.mesh.nodes, vr.running))
    io.write_json(ctx.out / "value.json", out)
    return code


def cmd_verify(ctx):
    from .valuefn import mc_cost, perturbed_policy, random_perturbations, value_from_solution
    sol, flow, rep = ctx.solve()
    if sol is None:
        return _fail_report(ctx, rep)
    phi = value_from_solution(ctx.model, sol, flow).phi
    J, se = mc_cost(ctx.model, sol.policy, ctx.m0, ctx.mc)
    rows = [("optimal", J, se, J - phi, abs(J - phi) <= 3 * se + 1e-3)]
    for i, (a, b, c) in enumerate(random_perturbations(10, ctx.cfg.seed)):
        Jp, sp = mc_cost(ctx.model, perturbed_policy(sol.policy, a, b, c), ctx.m0, ctx.mc, mesh=ctx.mesh)
        rows.append((f"perturbed_{i}", Jp, sp, Jp - phi, Jp >= phi - 3 * sp))
    ctx.say(f"Phi = {phi:.8g}")
    for r in rows:
        ctx.say(f"{r[0]:<14} J={r[1]:.8g} se={r[2]:.2e} J-Phi={r[3]:+.3e}  {'PASS' if r[4] else 'FAIL'}")
    io.write_table(ctx.out / "verify.csv", ["case", "J", "stderr", "J_minus_phi", "result"],
                   [(r[0], r[1], r[2], r[3], "PASS" if r[4] else "FAIL") for r in rows])
    return 0 if all(r[4] for r in rows) else 1


def cmd_derivative(ctx):
    from .valuefn import directional_derivative, solve_vbar
    sol, flow, rep = ctx.solve()
    if sol is None:
        return _fail_report(ctx, rep)
    fd, pred = directional_derivative(ctx.model, sol, flow, lambda x: np.ones_like(x), 1e-2, ctx.fp)
    ctx.say(f"mean-shift derivative: finite difference {fd:.8g}, int DV dm {pred:.8g}, gap {abs(fd - pred):.2e}")
    out = {"fd_derivative": fd, "int_DV_dm": pred, "gap": abs(fd - pred)}
    code = 0
    code |= int(abs(fd - pred) > 2e-3)
    vb = solve_vbar(ctx.model, sol, flow)
    cf = _oracle(ctx) if _is_lq(ctx.model) else None
    stride = max(1, ctx.mesh.n_steps // 10)
    rows = []
    for n in range(0, ctx.mesh.n_steps + 1, stride):
        row = [float(ctx.mesh.nodes[n]), vb.bilinear_coefficient(n), vb.symmetry_gap(n)]
        if cf is not None:
            row.append(float(cf.rho(ctx.mesh.nodes[n])))
        rows.append(row)
    cols = ["s", "bilinear_coefficient", "symmetry_gap"] + (["oracle_rho"] if _is_lq(ctx.model) else [])
    io.write_table(ctx.out / "vbar_summary.csv", cols, rows)
    for r in rows:
        ctx.say("  " + "  ".join(f"{v:.6g}" for v in r))
    zi = vb.z_index
    io.write_table(ctx.out / "vbar_nodes.csv", ["s", "x", "z", "vbar"],
                   [(float(ctx.mesh.nodes[n]), float(ctx.grid.nodes[i]), float(z), float(vb.vbar[n, i, j]))
                    for n in range(0, ctx.mesh.n_steps + 1, stride) for i in zi
                    for j, z in enumerate(vb.z_nodes)])
    out["inner_iterations"] = len(vb.history)
    out["inner_history"] = vb.history
    if cf is not None:
        out["oracle_derivative"] = cf.dphi_dmean()
        err = max(abs(r[1] - r[3]) for r in rows)
        out["max_bilinear_error"] = err
        code |= int(err > 5e-3)
    code |= int(max(r[2] for r in rows) > 1e-2)
    io.write_json(ctx.out / "derivative.json", out)
    return code


def cmd_master(ctx):
    from .valuefn import master_residual
    g = ctx.grid
    probes = np.unique(g.nodes[np.rint((np.array(PROBE_X) - g.x_min) / g.dx).astype(int)])
    r = master_residual(ctx.model, ctx.m0, probes, ctx.mesh.dt, cfg=ctx.fp)
    ctx.say(f"master residual at s = {r.s:.4g}")
    for x, v in zip(r.x, r.residual):
        ctx.say(f"  x = {x:+.3f}: {v:+.3e}")
    ctx.say(f"max |residual| = {r.max_abs:.3e}")
    io.write_json(ctx.out / "master.json", r.as_dict())
    return 0 if r.max_abs <= 0.05 else 1


COMMANDS = {"audit": cmd_audit, "solve": cmd_solve, "validate": cmd_validate, "simulate": cmd_simulate,
            "value": cmd_value, "verify": cmd_verify, "derivative": cmd_derivative, "master": cmd_master}


# ---------------------------------------------------------------- entry point

def _versions():
    import scipy
    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "mfhjb": __version__}


def parser():
    p = argparse.ArgumentParser(prog="mfhjb", description="Mean-field-type control HJB experiments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--format", choices=("csv", "binary", "both"), default=None)
    return p


def run(subcommand, config_path=None, overrides=(), out_dir=None, seed=None, workers=None, fmt=None,
        argv=None) -> int:
    t0 = time.time()
    ov = list(overrides)
    if seed is not None:
        ov.append(f"seed={int(seed)}")
    try:
        cfg = load_config(config_path, ov)
        fmt = fmt or cfg["output"]["format"]
        out = Path(out_dir or cfg["output"]["dir"]) / subcommand
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out, fmt, workers)
    except (ConfigError, MfhjbError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    error = None
    try:
        code = COMMANDS[subcommand](ctx)
    except (MfhjbError, RuntimeError, ValueError, ArithmeticError) as exc:
        code = 1
        error = {"type": type(exc).__name__, "message": str(exc),
                 "traceback": traceback.format_exc().splitlines()[-6:]}
        io.write_json(out / "error.json", error)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    (out / "summary.txt").write_text("\n".join(ctx.lines) + "\n")
    manifest = {"subcommand": subcommand, "exit_code": code, "config_sha256": cfg.digest(),
                "config": cfg.data, "config_source": cfg.source_text, "overrides": ov,
                "seed": cfg.seed, "workers": workers, "format": fmt, "versions": _versions(),
                "argv": argv, "wall_time_s": time.time() - t0,
                "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0)), "error": error}
    io.write_json(out / "manifest.json", manifest)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser().parse_args(argv)
    return run(args.subcommand, args.config, args.overrides, args.out_dir, args.seed, args.workers,
               args.format, argv)


if __name__ == "__main__":
    sys.exit(main())
