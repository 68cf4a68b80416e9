"""Value-level quantities built on a solved fixed point: Phi, Monte-Carlo
costs, the directional value-derivative identity, the first-order
derivative field V_bar and the master-equation residual."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
from scipy.integrate import trapezoid

from .errors import InnerNonConvergence, MeshMismatch, WeightDegenerate
from .fields import VectorField, grad_nodes, grad_nodes_T, interp_linear, second_diff
from .fixedpoint import FixedPointConfig, solve_mftc
from .flow import ESS_FLOOR, MCParams, drift_values
from .hjb import HJBSolution
from .measure import GridDensity, MeasureFlow, ParticleEnsemble, TimeMesh, sample_measure
from .pde import BC_QUADRATIC, adjoint_sweep, backward_sweep
from .rng import BLOCK_SIZE, STREAM_PATH, block_generator, block_slices

INNER_TOL = 1e-6
INNER_DAMPING = 0.5
INNER_MAX = 200
STREAM_COST = STREAM_PATH + 1


# ---------------------------------------------------------------- Phi

@dataclass(frozen=True, eq=False)
class ValueRecord:
    phi: float
    running: np.ndarray          # per-node running integrand, cost + F(m_s)
    running_integral: float
    terminal: float

    def as_dict(self):
        return {"phi": self.phi, "running_integral": self.running_integral,
                "terminal": self.terminal}


def value_from_solution(model, solution: HJBSolution, flow: MeasureFlow) -> ValueRecord:
    """Running cost along the flow (trapezoid in time) plus terminal terms."""
    mesh, grid = solution.mesh, solution.grid
    if not flow.mesh.same_as(mesh):
        raise MeshMismatch("flow and solution live on different meshes")
    x = grid.nodes
    run = np.empty(mesh.n_steps + 1)
    for n, s in enumerate(mesh.nodes):
        m = flow.slices[n]
        v = solution.policy.values[n]
        lv = model.running_cost(s, x, v)
        if isinstance(m, GridDensity):
            integ = grid.integrate(m.values * lv)
        else:
            integ = np.dot(m.weights, interp_linear(grid, lv, m.positions))
        run[n] = integ + model.mf_running.value(m)
    mT = flow.slices[-1]
    hT = model.terminal_h(x)
    if isinstance(mT, GridDensity):
        term = grid.integrate(mT.values * hT)
    else:
        term = np.dot(mT.weights, model.terminal_h(mT.positions))
    term = float(term + model.mf_terminal.value(mT))
    ri = float(trapezoid(run, dx=mesh.dt))
    return ValueRecord(ri + term, run, ri, term)


# ---------------------------------------------------------------- Monte-Carlo cost

def _policy_callable(policy, grid=None):
    if isinstance(policy, VectorField):
        vals, g, mesh = policy.values, policy.grid, policy.mesh
        return lambda k, s, X: interp_linear(g, vals[k], X), mesh
    return lambda k, s, X: policy(s, X), None


def perturbed_policy(policy: VectorField, amp: float, freq: float, phase: float) -> Callable:
    """Feedback v(s, x) + amp sin(freq x + phase), with v interpolated."""
    mesh, grid, vals = policy.mesh, policy.grid, policy.values
    nodes = mesh.nodes

    def pol(s, x):
        k = min(int(round((s - nodes[0]) / mesh.dt)), mesh.n_steps)
        return interp_linear(grid, vals[k], x) + amp * np.sin(freq * x + phase)
    return pol


def random_perturbations(n: int, seed: int):
    """(amp, freq, phase) triples with amp in [0.1, 0.3], freq in [0.5, 2]."""
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | (7 << 40)))
    return [(float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.5, 2.0)),
             float(rng.uniform(0.0, 2 * np.pi))) for _ in range(n)]


def mc_cost(model, policy: Union[VectorField, Callable], m0, mc: MCParams,
            mesh: Optional[TimeMesh] = None, reweight: bool = False):
    """Monte-Carlo cost of a feedback control; returns (J, standard error).

    Direct Euler simulation of dX = v ds + sigma dW by default; with
    reweight=True base paths are weighted by the Girsanov density instead.
    Mean-field costs use the empirical measure at every node.  The
    standard error comes from the per-particle influence function.
    """
    pol, pmesh = _policy_callable(policy)
    mesh = pmesh if mesh is None else mesh
    if mesh is None:
        raise ValueError("a time mesh is needed for callable policies")
    sig = model.sigma_scalar
    dt = mesh.dt
    sq = np.sqrt(dt)
    N = mc.n_particles
    X = sample_measure(m0, N, mc.seed, mc.workers)
    gens = [block_generator(mc.seed, b, STREAM_COST) for b in range(len(block_slices(N)))]
    slices = block_slices(N)
    logw = np.zeros(N)
    w_run = trapezoid_weights(mesh.n_steps, dt)
    run_mean = 0.0
    infl = np.zeros(N)

    def empirical(X, logw):
        if reweight:
            return ParticleEnsemble.from_log_weights(X, logw)
        return ParticleEnsemble.uniform(X)

    for k, s in enumerate(mesh.nodes):
        v = np.asarray(pol(k, s, X), dtype=float)
        m = empirical(X, logw)
        lvec = model.running_cost(s, X, v)
        dF = model.mf_running.dnu(m, X)
        if reweight:
            w = m.weights
            run_mean += w_run[k] * (np.dot(w, lvec) + model.mf_running.value(m))
        else:
            run_mean += w_run[k] * (lvec.mean() + model.mf_running.value(m))
        infl += w_run[k] * (lvec + dF)
        if k == mesh.n_steps:
            break
        dw = np.empty(N)
        for g, sl in zip(gens, slices):
            dw[sl] = sq * g.standard_normal(sl.stop - sl.start)
        if reweight:
            th = v / sig
            logw += th * dw - 0.5 * th * th * dt
            X = X + sig * dw
        else:
            X = X + v * dt + sig * dw
    mT = empirical(X, logw)
    hT = model.terminal_h(X)
    infl += hT + model.mf_terminal.dnu(mT, X)
    if reweight:
        w = mT.weights
        if 1.0 / np.sum(w * w) < ESS_FLOOR * N:
            raise WeightDegenerate("effective sample size collapsed in reweighted cost")
        J = run_mean + np.dot(w, hT) + model.mf_terminal.value(mT)
        # self-normalized delta-method error of the influence function
        mean_infl = np.dot(w, infl)
        se = np.sqrt(np.sum(w * w * (infl - mean_infl) ** 2))
    else:
        J = run_mean + hT.mean() + model.mf_terminal.value(mT)
        se = infl.std(ddof=1) / np.sqrt(N)
    return float(J), float(se)


def trapezoid_weights(n_steps: int, dt: float) -> np.ndarray:
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


# ---------------------------------------------------------------- value derivative

def pushforward_density(m: GridDensity, direction: Callable, eps: float) -> GridDensity:
    """Density of x + eps X(x) for x ~ m, assuming the map is increasing."""
    x = m.grid.nodes
    X = np.broadcast_to(np.asarray(direction(x), dtype=float), x.shape)
    if np.allclose(X, X[0]):
        return m.shifted(eps * float(X[0]))
    y = x + eps * X
    jac = 1.0 + eps * np.gradient(X, m.grid.dx)
    if np.any(jac <= 0) or np.any(np.diff(y) <= 0):
        raise ValueError("map x + eps X(x) is not increasing; reduce eps")
    v = np.interp(x, y, m.values / jac, left=0.0, right=0.0)
    return GridDensity(m.grid, v * m.mass() / m.grid.integrate(v))


def phi_at(model, m0: GridDensity, mesh: TimeMesh, cfg: Optional[FixedPointConfig] = None) -> float:
    sol, flow, rep = solve_mftc(model, m0, mesh, m0.grid, cfg)
    if sol is None:
        raise RuntimeError(f"fixed point failed: {rep.message}")
    return value_from_solution(model, sol, flow).phi


def directional_derivative(model, solution: HJBSolution, flow: MeasureFlow, direction: Callable,
                           eps: float = 1e-2, cfg: Optional[FixedPointConfig] = None):
    """(finite-difference derivative of Phi along (I + eps X)#m, int DV X dm)."""
    m0 = flow.slices[0]
    grid, mesh = solution.grid, solution.mesh
    X = np.broadcast_to(np.asarray(direction(grid.nodes), dtype=float), grid.nodes.shape)
    pred = float(grid.integrate(m0.values * solution.DV.values[0] * X))
    if np.all(X == 0):
        return 0.0, pred
    up = phi_at(model, pushforward_density(m0, direction, eps), mesh, cfg)
    dn = phi_at(model, pushforward_density(m0, direction, -eps), mesh, cfg)
    return (up - dn) / (2 * eps), pred


def value_derivative_check(model, solution: HJBSolution, flow: MeasureFlow, direction: Callable,
                           eps: float = 1e-2, cfg: Optional[FixedPointConfig] = None) -> float:
    fd, pred = directional_derivative(model, solution, flow, direction, eps, cfg)
    return abs(fd - pred)


# ---------------------------------------------------------------- V_bar

@dataclass(frozen=True, eq=False)
class DerivativeField:
    mesh: TimeMesh
    grid: object
    z_nodes: np.ndarray
    z_index: np.ndarray
    vbar: np.ndarray           # (n_t+1, N, K): V_bar(s, x, z)
    source: np.ndarray         # full source of the V_bar equation
    source_green: np.ndarray   # Green-function part alone (no flow feedback)
    history: List[float] = field(default_factory=list)

    def at_nodes(self, n: int) -> np.ndarray:
        """K x K block V_bar(s_n, z_i, z_j)."""
        return self.vbar[n][self.z_index, :]

    def bilinear_coefficient(self, n: int) -> float:
        """Least-squares xz coefficient after removing f(x) + g(z)."""
        B = self.at_nodes(n)
        Bc = B - B.mean(axis=0, keepdims=True) - B.mean(axis=1, keepdims=True) + B.mean()
        zc = self.z_nodes - self.z_nodes.mean()
        return float(zc @ Bc @ zc / (zc @ zc) ** 2)

    def symmetry_gap(self, n: int) -> float:
        """max |V_bar(s,x,z) - V_bar(s,z,x)| modulo additive f(x) + g(z)."""
        B = self.at_nodes(n)
        Bc = B - B.mean(axis=0, keepdims=True) - B.mean(axis=1, keepdims=True) + B.mean()
        return float(np.max(np.abs(Bc - Bc.T)))


def default_grid_z(grid, half_width: float = 4.0, stride: int = 10) -> np.ndarray:
    idx = np.flatnonzero(grid.core_mask(half_width))
    mid = grid.n_points // 2
    keep = idx[(idx - mid) % stride == 0]
    return grid.nodes[keep]


def _second_derivative_blocks(mf, m, x, z):
    if mf.d2nu is None:
        raise ValueError("the model does not supply second-order measure derivatives")
    return np.broadcast_to(np.asarray(mf.d2nu(m, x[:, None], z[None, :]), dtype=float),
                           (x.size, z.size))


def solve_vbar(model, solution: HJBSolution, flow: MeasureFlow, grid_z=None,
               bc=BC_QUADRATIC, tol: float = INNER_TOL, damping: float = INNER_DAMPING,
               max_iter: int = INNER_MAX) -> DerivativeField:
    """First-order derivative field V_bar(s, x, z) on mesh x grid x grid_z.

    The source d/dm dF/dnu(m_s)(x)(z) is the pairing of d2F/dnu2(m_s)(x, .)
    with the derivative of the flow in the direction delta_z.  That
    derivative is carried by the discrete adjoint of the backward operator
    started from e_z (which reproduces the Green function) plus the
    feedback of the flow through D_pH, which depends on V_bar itself; the
    feedback is resolved by a damped inner Picard iteration.
    """
    mesh, grid = solution.mesh, solution.grid
    if not flow.mesh.same_as(mesh) or flow.representation != "grid":
        raise MeshMismatch("V_bar needs the grid flow on the solution mesh")
    grid_z = default_grid_z(grid) if grid_z is None else np.asarray(grid_z, dtype=float)
    zi = grid.index_of(grid_z)
    zs = grid.nodes[zi]
    x = grid.nodes
    N, K, n, dt = grid.n_points, zi.size, mesh.n_steps, mesh.dt
    a = model.a_scalar
    w = grid.weights
    b = drift_values(model, solution.DV)
    dens = flow.density_array()
    # m_s D2_pH at every node, the weight of the flow feedback
    hpp = np.broadcast_to(model.dpp(mesh.nodes[:, None], x[None, :], solution.DV.values),
                          dens.shape) * dens
    Fblocks = [_second_derivative_blocks(model.mf_running, flow.slices[k], x, x) for k in range(n + 1)]
    FT = _second_derivative_blocks(model.mf_terminal, flow.slices[-1], x, x)
    init = np.zeros((N, K))
    init[zi, np.arange(K)] = 1.0

    def sweep(vbar_prev):
        src = np.empty((n + 1, N, K))
        if vbar_prev is None:
            forcing = None
        else:
            def forcing(k, r):
                dvb = grad_nodes(vbar_prev[k].T, grid.dx).T       # d/dx V_bar at (zeta, z)
                return grad_nodes_T(w[:, None] * hpp[k][:, None] * dvb, grid.dx)
        term = {}

        def on_step(k, r):
            src[k] = Fblocks[k] @ r
            if k == n:
                term["v"] = FT @ r
        adjoint_sweep(a, grid, mesh, init, b, forcing, bc, on_step=on_step, store=False)
        vb = backward_sweep(a, grid, mesh, term["v"], b, src, bc)
        return vb, src

    vbar, src0 = sweep(None)
    source = src0
    history = []
    if any(np.any(F != 0) for F in Fblocks) or np.any(FT != 0):
        for _ in range(max_iter):
            new, source = sweep(vbar)
            res = float(np.max(np.abs(new - vbar)))
            history.append(res)
            vbar = (1 - damping) * vbar + damping * new
            if res < tol:
                break
        else:
            raise InnerNonConvergence("inner V_bar iteration did not reach tolerance", history)
    return DerivativeField(mesh, grid, zs, zi, vbar, source, src0, history)


# ---------------------------------------------------------------- master equation

@dataclass(frozen=True, eq=False)
class MasterResidual:
    s: float
    x: np.ndarray
    residual: np.ndarray
    terms: dict
    n_points: int
    dt: float

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def as_dict(self):
        return {"s": self.s, "x": self.x.tolist(), "residual": self.residual.tolist(),
                "max_abs": self.max_abs, "n_points": self.n_points, "dt": self.dt,
                "terms": {k: np.asarray(v).tolist() for k, v in self.terms.items()}}


def master_residual(model, m0: GridDensity, probe_x, dt: float, h_steps: int = 10,
                    cfg: Optional[FixedPointConfig] = None, grid_z=None) -> MasterResidual:
    """Residual of the master equation at (s0, x) with m = m0, s0 = t + h.

    U(s, x, m0) = V^{m0, s}(s, x) is obtained from fixed-point solves started
    at s0 - h, s0 and s0 + h with h = h_steps dt; dU/ds is the centered
    difference and dU/dnu comes from V_bar of the solve started at s0.
    The xi-integrals use trapezoid weights on grid_z.
    """
    grid = m0.grid
    t, T = model.horizon
    h = h_steps * dt
    s0 = t + h
    xi = grid.index_of(probe_x)
    U = {}
    for lab, s in (("m", s0 - h), ("0", s0), ("p", s0 + h)):
        mesh = TimeMesh.from_dt(s, T, dt)
        mod = model.with_horizon(s, T)
        sol, flow, rep = solve_mftc(mod, m0, mesh, grid, cfg)
        if sol is None:
            raise RuntimeError(f"fixed point failed at s={s:.4g}: {rep.message}")
        U[lab] = (mod, sol, flow)
    mod, sol, flow = U["0"]
    a = model.a_scalar
    V0 = sol.V.values[0]
    dUds = (U["p"][1].V.values[0] - U["m"][1].V.values[0]) / (2 * h)
    DU = sol.DV.values[0]
    AU = -0.5 * a * second_diff(V0, grid.dx)
    H = model.hamiltonian(s0, grid.nodes, DU)
    dF = model.mf_running.dnu(m0, grid.nodes)
    vb = solve_vbar(mod, sol, flow, grid_z)
    zs = vb.z_nodes
    dz = zs[1] - zs[0] if zs.size > 1 else 1.0
    if zs.size < 3 or np.any(np.abs(np.diff(zs) - dz) > 1e-9):
        raise MeshMismatch("grid_z must be evenly spaced with at least three nodes")
    wz = np.full(zs.size, dz)
    wz[0] = wz[-1] = 0.5 * dz
    B = vb.vbar[0][xi]                                   # (P, K): V_bar(s0, x, xi)
    Dxi = grad_nodes(B, dz)
    Axi = -0.5 * a * second_diff(B, dz)
    mz = m0.values[vb.z_index]
    DUz = DU[vb.z_index]
    drift_z = model.hamiltonian_dp(s0, zs, DUz)
    int_A = (Axi * mz) @ wz
    int_D = (Dxi * drift_z * mz) @ wz
    res = -dUds[xi] + AU[xi] + int_A - H[xi] - int_D - dF[xi]
    terms = {"dU_ds": dUds[xi], "AU": AU[xi], "int_A_xi": int_A, "H": H[xi],
             "int_DpH_Dxi": int_D, "dF_dnu": dF[xi]}
    return MasterResidual(float(s0), grid.nodes[xi], res, terms, grid.n_points, float(dt))
