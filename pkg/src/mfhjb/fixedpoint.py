"""Damped Picard iteration V -> m -> V for the coupled HJB / flow system."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import BlowUp, LinearSolveFailure, MassLeak
from .fields import weighted_l2
from .flow import FlowMethod, MCParams, flow_from_gradient
from .hjb import CENTERED, HJBSolution, solution_from_values, solve_hjb
from .measure import Grid1D, GridDensity, MeasureFlow, TimeMesh, wasserstein2_1d
from .pde import BC_QUADRATIC, solve_forward_fp

CONVERGED = "CONVERGED"
MAX_ITERS = "MAX_ITERS"
BLOWUP = "BLOWUP"
MIN_DAMPING = 1.0 / 64


@dataclass(frozen=True)
class FixedPointConfig:
    max_iters: int = 60
    tol_V: float = 1e-7
    tol_W2: float = 1e-6
    damping: float = 1.0
    flow_method: FlowMethod = FlowMethod.FP_GRID
    mc: Optional[MCParams] = None
    bc: str = BC_QUADRATIC
    hamiltonian: str = CENTERED
    core_half_width: Optional[float] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.tol_V > 0 and self.tol_W2 > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        object.__setattr__(self, "flow_method", FlowMethod(self.flow_method))


@dataclass
class IterationRecord:
    iteration: int
    res_weighted: float
    res_max_core: float
    w2: float
    damping: float
    dominated: Optional[bool]

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class FixedPointReport:
    verdict: str = MAX_ITERS
    history: List[IterationRecord] = field(default_factory=list)
    majorant_flag: bool = False      # horizon outside the small-time windows
    convex_regime: bool = False
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.history)

    def residuals(self) -> np.ndarray:
        return np.array([[r.res_weighted, r.res_max_core, r.w2] for r in self.history])

    def as_dict(self):
        return {"verdict": self.verdict, "iterations": self.iterations,
                "majorant_flag": self.majorant_flag, "convex_regime": self.convex_regime,
                "message": self.message, "history": [r.as_dict() for r in self.history]}


def weighted_h1_distance(A: HJBSolution, B: HJBSolution, gamma: float) -> float:
    """pi_gamma-weighted L2(H1) distance in space-time."""
    g, dt = A.grid, A.mesh.dt
    dV = A.V.values - B.V.values
    dD = A.DV.values - B.DV.values
    return float(np.sqrt(weighted_l2(dV, g, dt, gamma) + weighted_l2(dD, g, dt, gamma)))


def max_core_distance(A: HJBSolution, B: HJBSolution, half_width=None) -> float:
    core = A.grid.core_mask(half_width)
    return float(np.max(np.abs(A.V.values[:, core] - B.V.values[:, core])))


def _hold(flow: MeasureFlow, mesh: TimeMesh) -> MeasureFlow:
    """Spread a flow recorded on a coarser mesh to every node (piecewise constant)."""
    if flow.mesh.same_as(mesh):
        return flow
    k = mesh.n_steps // flow.mesh.n_steps
    slices = [flow.slices[min(n // k, flow.mesh.n_steps)] for n in range(mesh.n_steps + 1)]
    return MeasureFlow(mesh, slices, flow.representation)


def _flow_w2(a: MeasureFlow, b: MeasureFlow) -> float:
    step = max(1, a.mesh.n_steps // 50)
    return max(wasserstein2_1d(a.slices[n], b.slices[n]) for n in range(0, a.mesh.n_steps + 1, step))


def horizon_status(model, horizon):
    from .majorant import feasibility_windows
    from .model import convexity_holds
    wV, wDV = feasibility_windows(model.constants)
    length = horizon[1] - horizon[0]
    feasible = length < min(wV, wDV)
    convex = convexity_holds(model)
    return feasible, convex


def solve_mftc(model, m0: GridDensity, mesh: TimeMesh, grid: Grid1D,
               cfg: Optional[FixedPointConfig] = None, V_init: Optional[np.ndarray] = None):
    """Returns (HJBSolution, MeasureFlow, FixedPointReport).

    The solution is the last accepted iterate (None if the very first solve
    blows up); the flow is the one induced by its gradient.
    """
    cfg = FixedPointConfig() if cfg is None else cfg
    gamma = model.constants.gamma
    feasible, convex = horizon_status(model, (mesh.t, mesh.T))
    report = FixedPointReport(majorant_flag=not feasible, convex_regime=convex)
    if not feasible and not convex:
        warnings.warn("horizon lies outside the feasibility windows and the convex regime "
                      "does not apply; proceeding", RuntimeWarning, stacklevel=2)

    def hjb(flow):
        return solve_hjb(model, _hold(flow, mesh), mesh, grid, cfg.bc, cfg.hamiltonian)

    def induced(sol):
        return flow_from_gradient(model, sol.DV, m0, cfg.flow_method, cfg.mc, cfg.bc)

    try:
        if V_init is None:
            V = hjb(solve_forward_fp(None, model.sigma, mesh, grid, m0))
        else:
            V = solution_from_values(model, mesh, grid, V_init)
    except (BlowUp, LinearSolveFailure, MassLeak) as exc:
        report.verdict, report.message = BLOWUP, str(exc)
        return None, None, report
    theta = cfg.damping
    prev_flow, prev_res = None, np.inf
    dom = _domination(model, mesh)
    for it in range(1, cfg.max_iters + 1):
        try:
            flow = induced(V)
            W = hjb(flow)
        except (BlowUp, LinearSolveFailure, MassLeak) as exc:
            report.verdict, report.message = BLOWUP, str(exc)
            return V, prev_flow, report
        V_new = W if theta == 1.0 else solution_from_values(
            model, mesh, grid, (1 - theta) * V.V.values + theta * W.V.values)
        rw = weighted_h1_distance(V_new, V, gamma)
        rm = max_core_distance(V_new, V, cfg.core_half_width)
        w2 = _flow_w2(flow, prev_flow) if prev_flow is not None else np.inf
        if not np.isfinite(rw) or rm > 1e12:
            report.verdict, report.message = BLOWUP, "residual is not finite"
            return V, flow, report
        report.history.append(IterationRecord(it, rw, rm, w2, theta, dom(V_new)))
        res = max(rw, rm)
        if res > prev_res and theta > MIN_DAMPING:
            theta = max(theta / 2, MIN_DAMPING)
        prev_res = res
        V, prev_flow = V_new, flow
        if rw < cfg.tol_V and rm < cfg.tol_V and w2 < cfg.tol_W2:
            report.verdict = CONVERGED
            break
        if rw < cfg.tol_V and rm < cfg.tol_V and model.decoupled:
            # the flow does not feed back, so one more W2 sample adds nothing
            report.verdict = CONVERGED
            break
    try:
        final_flow = induced(V)
    except (LinearSolveFailure, MassLeak) as exc:
        report.verdict, report.message = BLOWUP, str(exc)
        return V, prev_flow, report
    return V, final_flow, report


def _domination(model, mesh):
    """Per-iteration domination flag, or None when no window covers the horizon."""
    from .majorant import domination_margins, majorant_params
    mp = majorant_params(model.constants, (mesh.t, mesh.T), model.trace_a)
    if not (mp.feasible_V and mp.feasible_DV):
        return lambda sol: None

    def check(sol):
        mV, mDV = domination_margins(sol.V.values, sol.DV.values, mesh, sol.grid, mp)
        return bool(mV <= 0 and mDV <= 0)
    return check


def flow_property_check(model, solution: HJBSolution, flow: MeasureFlow, tau_index: int,
                        cfg: Optional[FixedPointConfig] = None, half_width=None) -> float:
    """Max core discrepancy between V on [tau, T] and the problem restarted at tau from m_tau."""
    mesh, grid = solution.mesh, solution.grid
    if not 0 <= tau_index < mesh.n_steps:
        raise ValueError("tau_index must leave at least one step")
    m_tau = flow.slices[tau_index] if flow.mesh.same_as(mesh) else _hold(flow, mesh).slices[tau_index]
    if not isinstance(m_tau, GridDensity):
        raise TypeError("restart needs a grid density")
    sub = mesh.tail(tau_index)
    restarted, _, rep = solve_mftc(model.with_horizon(sub.t, sub.T), m_tau, sub, grid, cfg)
    if restarted is None:
        return float("inf")
    core = grid.core_mask(half_width)
    return float(np.max(np.abs(restarted.V.values[:, core] - solution.V.values[tau_index:, core])))
