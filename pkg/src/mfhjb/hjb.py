"""Backward solve of the HJB equation for a frozen measure flow, with
gradient and feedback extraction.

Scheme: implicit diffusion, Hamiltonian explicit in the gradient of the
previous (later) slice,

    (I - dt a/2 D2) V^k = V^{k+1} + dt [H(s_{k+1}, x, DV^{k+1}) + dF/dnu(m_{k+1})(x)].

DV is the centered difference (second-order one-sided at the ends); the
first step uses the analytic terminal gradient when the model supplies one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BlowUp, InfeasibleHorizon, MeshMismatch, MinimizerDomain, AssumptionViolation
from .fields import ScalarField, VectorField, grad_nodes, second_diff, weighted_l2
from .measure import Grid1D, MeasureFlow, TimeMesh
from .pde import BC_QUADRATIC, _implicit, _solve, generator_band

CENTERED = "centered"
LAX_FRIEDRICHS = "lax_friedrichs"
BLOWUP_FACTOR = 10.0
POLICY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class HJBSolution:
    V: ScalarField
    DV: VectorField
    policy: VectorField
    diagnostics: dict = field(default_factory=dict)

    @property
    def mesh(self) -> TimeMesh:
        return self.V.mesh

    @property
    def grid(self) -> Grid1D:
        return self.V.grid


def gradient(V: ScalarField) -> VectorField:
    return VectorField(V.mesh, V.grid, grad_nodes(V.values, V.grid.dx))


def _gate(model, horizon):
    """Majorant used as blow-up gate, or None when no window covers the horizon."""
    from .majorant import GLOBAL_CONVEX, majorant_params
    k = model.constants
    mp = majorant_params(k, horizon, model.trace_a)
    if mp.feasible_V:
        return mp
    if model.convex and k.lam > 0 and k.C_global is not None:
        return majorant_params(k, horizon, model.trace_a, GLOBAL_CONVEX, True, k.C_global)
    return None


def _first_bad(s_nodes, x, arr):
    k, i = np.argwhere(~np.isfinite(arr))[0]
    return float(s_nodes[k]), float(x[i])


def solve_hjb(model, flow: MeasureFlow, mesh: TimeMesh, grid: Grid1D, bc=BC_QUADRATIC,
              hamiltonian: str = CENTERED, blowup_gate: bool = True) -> HJBSolution:
    if not flow.mesh.same_as(mesh):
        raise MeshMismatch("measure flow lives on another mesh")
    if hamiltonian not in (CENTERED, LAX_FRIEDRICHS):
        raise ValueError(f"unknown Hamiltonian discretization {hamiltonian!r}")
    a = model.a_scalar
    x, dx = grid.nodes, grid.dx
    n, dt = mesh.n_steps, mesh.dt
    s_nodes = mesh.nodes
    V = np.empty((n + 1, grid.n_points))
    mT = flow.slices[-1]
    V[n] = model.terminal_value(mT, x)
    if not np.all(np.isfinite(V[n])):
        raise BlowUp("non-finite terminal data", *_first_bad(s_nodes[-1:], x, V[n][None]))
    p = np.asarray(model.terminal_gradient(mT, x), dtype=float)
    if not np.all(np.isfinite(p)):
        p = grad_nodes(V[n], dx)
    gate = _gate(model, (mesh.t, mesh.T)) if blowup_gate else None
    M_const = _implicit(generator_band(grid, a, None, bc), dt)
    for k in range(n - 1, -1, -1):
        s1 = s_nodes[k + 1]
        src = model.hamiltonian(s1, x, p) + model.mf_running.dnu(flow.slices[k + 1], x)
        if hamiltonian == LAX_FRIEDRICHS:
            theta = float(np.max(np.abs(model.hamiltonian_dp(s1, x, p))))
            M = _implicit(generator_band(grid, a + theta * dx, None, bc), dt)
        else:
            M = M_const
        V[k] = _solve(M, V[k + 1] + dt * src)
        if not np.all(np.isfinite(V[k])):
            raise BlowUp("non-finite value during backward sweep", *_first_bad(s_nodes[k:k + 1], x, V[k][None]))
        if gate is not None:
            excess = np.abs(V[k]) - BLOWUP_FACTOR * gate.z(s_nodes[k], x)
            i = int(np.argmax(excess))
            if excess[i] > 0:
                raise BlowUp(f"|V| exceeds {BLOWUP_FACTOR:g} x majorant", float(s_nodes[k]), float(x[i]))
        p = grad_nodes(V[k], dx)
    return solution_from_values(model, mesh, grid, V, {"hamiltonian": hamiltonian, "bc": bc})


def solution_from_values(model, mesh: TimeMesh, grid: Grid1D, V: np.ndarray,
                         extra: Optional[dict] = None) -> HJBSolution:
    """Wrap nodal values of V with their gradient, policy and diagnostics."""
    Vf = ScalarField(mesh, grid, V)
    DV = gradient(Vf)
    pol = _policy_values(model, mesh, grid, DV.values)
    diag = {"max_abs_V": float(np.max(np.abs(Vf.values))),
            "max_abs_DV": float(np.max(np.abs(DV.values)))}
    diag.update(extra or {})
    sol = HJBSolution(Vf, DV, VectorField(mesh, grid, pol), diag)
    diag.update(weighted_seminorms(sol, model.constants.gamma))
    return sol


def _policy_values(model, mesh, grid, DV):
    s = mesh.nodes[:, None]
    x = grid.nodes[None, :]
    with np.errstate(all="ignore"):
        pol = np.asarray(model.minimizer(s, x, DV), dtype=float)
    pol = np.broadcast_to(pol, DV.shape)
    if not np.all(np.isfinite(pol)):
        k, i = np.argwhere(~np.isfinite(pol))[0]
        raise MinimizerDomain(f"v_hat is not finite at s={mesh.nodes[k]:.6g}, x={grid.nodes[i]:.6g}")
    return np.array(pol)


def extract_policy(model, solution: HJBSolution) -> VectorField:
    """v_hat(s, x, DV), checked against D_pH(s, x, DV)."""
    mesh, grid, DV = solution.mesh, solution.grid, solution.DV.values
    pol = _policy_values(model, mesh, grid, DV)
    dph = model.hamiltonian_dp(mesh.nodes[:, None], grid.nodes[None, :], DV)
    gap = np.abs(pol - dph)
    if np.max(gap) > POLICY_TOL * (1 + np.max(np.abs(DV))):
        k, i = np.unravel_index(int(np.argmax(gap)), gap.shape)
        raise AssumptionViolation("D_pH = v_hat", (mesh.nodes[k], grid.nodes[i]), float(gap[k, i]))
    return VectorField(mesh, grid, pol)


def weighted_seminorms(solution: HJBSolution, gamma: float = 4.0) -> dict:
    """pi_gamma-weighted squared norms of dV/ds, D2V and dDV/ds."""
    V, DV = solution.V.values, solution.DV.values
    dt, dx, grid = solution.mesh.dt, solution.grid.dx, solution.grid
    Vs = np.diff(V, axis=0) / dt
    DVs = np.diff(DV, axis=0) / dt
    D2V = second_diff(V, dx)
    return {"dV_ds": weighted_l2(Vs, grid, dt, gamma),
            "D2V": weighted_l2(D2V, grid, dt, gamma),
            "dDV_ds": weighted_l2(DVs, grid, dt, gamma)}


def time_regularity_constant(V: ScalarField, half_width: Optional[float] = None) -> float:
    """Smallest C with |V(s2,x)-V(s1,x)| <= C[(1+|x|)|ds|^1/2 + (1+x^2)|ds|] on the core.

    Sampled over dyadic lags; a finite, mesh-stable value is the check.
    """
    core = V.grid.core_mask(half_width)
    x = V.grid.nodes[core]
    vals = V.values[:, core]
    n, dt = V.mesh.n_steps, V.mesh.dt
    best = 0.0
    lag = 1
    while lag <= n:
        ds = lag * dt
        diff = np.abs(vals[lag:] - vals[:-lag])
        bound = (1 + np.abs(x)) * np.sqrt(ds) + (1 + x ** 2) * ds
        best = max(best, float(np.max(diff / bound)))
        lag *= 2
    return best


def majorant_checks(model, solution: HJBSolution, slack: float = 5e-3, mode=None,
                    C_global=None) -> dict:
    """Domination margins against z and z_bar (<= 0 means dominated)."""
    from .majorant import SMALL_TIME, domination_margins, majorant_params
    mode = SMALL_TIME if mode is None else mode
    mesh = solution.mesh
    mp = majorant_params(model.constants, (mesh.t, mesh.T), model.trace_a, mode,
                         model.convex and model.constants.lam > 0, C_global)
    if not (mp.feasible_V and mp.feasible_DV):
        raise InfeasibleHorizon("horizon lies outside the feasibility windows")
    mV, mDV = domination_margins(solution.V.values, solution.DV.values, mesh, solution.grid, mp, slack)
    return {"margin_V": mV, "margin_DV": mDV, "dominated": bool(mV <= 0 and mDV <= 0)}
