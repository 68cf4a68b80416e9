"""One-dimensional parabolic solvers.

Backward linear advection-diffusion (implicit in time), the conservative
forward Fokker-Planck scheme, its discrete adjoint, and Green tables.

Drift terms use a hybrid stencil: centered where the cell Peclet number
|g| dx / a is at most one and first-order upwind elsewhere.  Either way the
implicit matrix stays an M-matrix, so the discrete maximum principle holds,
while linear drifts acting on quadratic data are reproduced without the
O(dx) bias of pure upwinding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import solve_banded

from .errors import GrowthViolation, LinearSolveFailure, MassLeak, MeshMismatch
from .fields import ScalarField, VectorField
from .measure import Grid1D, GridDensity, MeasureFlow, TimeMesh, check_leak

BC_QUADRATIC = "quadratic"
BC_NEUMANN = "neumann"
BOUNDARY_POLICIES = (BC_QUADRATIC, BC_NEUMANN)
HYBRID = "hybrid"
UPWIND = "upwind"
LEAK_TOL = 1e-6

Coefficient = Union[None, float, Callable, np.ndarray]


@dataclass(frozen=True, eq=False)
class LinearPDECoefficients:
    """-dJ/ds + A J - g . DJ = l on [t,T), J(T) = l_T."""
    drift: Coefficient = None
    source: Coefficient = None
    terminal: Coefficient = None


@dataclass(frozen=True, eq=False)
class GreenTable:
    mesh: TimeMesh       # [t, s]
    grid: Grid1D
    values: np.ndarray   # G[tau][z][zeta]


def diffusion_coefficient(sigma) -> float:
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    if s.shape != (1, 1):
        from .errors import Unsupported
        raise Unsupported("solvers target dim = 1")
    return float(s[0, 0] ** 2)


def field_values(f: Coefficient, mesh: TimeMesh, grid: Grid1D) -> Optional[np.ndarray]:
    """Evaluate a coefficient on the mesh x grid as an (n_t+1, N[, K]) array."""
    if f is None:
        return None
    if isinstance(f, ScalarField):
        if not f.mesh.same_as(mesh) or f.grid != grid:
            raise MeshMismatch("coefficient field lives on another mesh")
        return f.values
    if callable(f):
        x = grid.nodes
        return np.stack([np.broadcast_to(np.asarray(f(s, x), dtype=float), x.shape)
                         for s in mesh.nodes])
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full((mesh.n_steps + 1, grid.n_points), float(arr))
    if arr.shape[:2] != (mesh.n_steps + 1, grid.n_points):
        raise MeshMismatch(f"coefficient shape {arr.shape} does not match mesh x grid")
    return arr


def terminal_values(f: Coefficient, grid: Grid1D) -> np.ndarray:
    if f is None:
        return np.zeros(grid.n_points)
    if callable(f):
        return np.broadcast_to(np.asarray(f(grid.nodes), dtype=float), (grid.n_points,)).copy()
    arr = np.asarray(f, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.n_points, float(arr))
    if arr.shape[0] != grid.n_points:
        raise MeshMismatch("terminal data does not match the grid")
    return arr.copy()


def generator_band(grid: Grid1D, a: float, g=None, bc=BC_QUADRATIC, scheme=HYBRID) -> np.ndarray:
    """(2,2)-banded matrix of L u = a/2 u'' + g u'; entry A[i,j] sits at ab[2+i-j, j]."""
    if bc not in BOUNDARY_POLICIES:
        raise ValueError(f"unknown boundary policy {bc!r}")
    N, dx = grid.n_points, grid.dx
    ab = np.zeros((5, N))
    d = 0.5 * a / dx ** 2
    ab[3, :-2] += d          # A[i, i-1], i = 1..N-2
    ab[2, 1:-1] += -2 * d
    ab[1, 2:] += d           # A[i, i+1]
    if g is not None:
        g = np.broadcast_to(np.asarray(g, dtype=float), (N,))
        gi = g[1:-1]
        if scheme == HYBRID:
            cen = np.abs(gi) * dx <= a
        elif scheme == UPWIND:
            cen = np.zeros(gi.shape, dtype=bool)
        else:
            raise ValueError(f"unknown drift scheme {scheme!r}")
        pos = ~cen & (gi > 0)
        neg = ~cen & (gi <= 0)
        half = gi / (2 * dx)
        full = gi / dx
        ab[3, :-2] += np.where(cen, -half, 0.0) + np.where(neg, -full, 0.0)
        ab[1, 2:] += np.where(cen, half, 0.0) + np.where(pos, full, 0.0)
        ab[2, 1:-1] += np.where(pos, -full, 0.0) + np.where(neg, full, 0.0)
    if bc == BC_QUADRATIC:
        # ghost node from quadratic extrapolation: u'' copies the neighbour's
        ab[2, 0] += d
        ab[1, 1] += -2 * d
        ab[0, 2] += d
        ab[2, N - 1] += d
        ab[3, N - 2] += -2 * d
        ab[4, N - 3] += d
        if g is not None:
            c0 = g[0] / (2 * dx)
            ab[2, 0] += -3 * c0
            ab[1, 1] += 4 * c0
            ab[0, 2] += -c0
            c1 = g[-1] / (2 * dx)
            ab[2, N - 1] += 3 * c1
            ab[3, N - 2] += -4 * c1
            ab[4, N - 3] += c1
    else:
        ab[2, 0] += -2 * d
        ab[1, 1] += 2 * d
        ab[2, N - 1] += -2 * d
        ab[3, N - 2] += 2 * d
    return ab


def band_transpose(ab: np.ndarray) -> np.ndarray:
    N = ab.shape[1]
    out = np.zeros_like(ab)
    for d in range(-2, 3):
        j = np.arange(max(0, -d), min(N, N - d))
        out[2 + d, j] = ab[2 - d, j + d]
    return out


def band_matvec(ab: np.ndarray, u: np.ndarray) -> np.ndarray:
    N = ab.shape[1]
    out = np.zeros_like(u, dtype=float)
    for k in range(5):
        d = k - 2  # i - j
        j = np.arange(max(0, -d), min(N, N - d))
        out[j + d] += (ab[k, j] * u[j].T).T
    return out


def _implicit(ab_L, dt):
    M = -dt * ab_L
    M[2] += 1.0
    return M


def _solve(M, rhs):
    try:
        out = solve_banded((2, 2), M, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(out)):
        raise LinearSolveFailure("banded solve produced non-finite values")
    return out


def backward_sweep(a: float, grid: Grid1D, mesh: TimeMesh, terminal: np.ndarray,
                   drift: Optional[np.ndarray] = None, source: Optional[np.ndarray] = None,
                   bc=BC_QUADRATIC, scheme=HYBRID, step_hook=None) -> np.ndarray:
    """Implicit backward sweep; terminal may carry extra right-hand-side columns.

    (I - dt L_k) u_k = u_{k+1} + dt l_{k+1}, with L_k built from drift[k].
    """
    n, dt = mesh.n_steps, mesh.dt
    u = np.asarray(terminal, dtype=float)
    out = np.empty((n + 1,) + u.shape)
    out[n] = u
    M_const = None
    if drift is None:
        M_const = _implicit(generator_band(grid, a, None, bc, scheme), dt)
    for k in range(n - 1, -1, -1):
        M = M_const if M_const is not None else _implicit(generator_band(grid, a, drift[k], bc, scheme), dt)
        rhs = out[k + 1] if source is None else out[k + 1] + dt * source[k + 1]
        out[k] = _solve(M, rhs)
        if step_hook is not None:
            step_hook(k, out[k])
    return out


def adjoint_sweep(a: float, grid: Grid1D, mesh: TimeMesh, init: np.ndarray,
                  drift: Optional[np.ndarray] = None, forcing: Optional[Callable] = None,
                  bc=BC_QUADRATIC, scheme=HYBRID, on_step: Optional[Callable] = None,
                  store: bool = True):
    """Forward recursion with the transposed backward operators.

    r_{k+1} = (I - dt L_k)^{-T} (r_k + dt q_k), q_k = forcing(k, r_k).
    If r_0 = e_z this yields row z of the backward propagator, so
    G(t, z; s_k, zeta) = r_k[zeta] / w_zeta exactly.
    """
    n, dt = mesh.n_steps, mesh.dt
    r = np.asarray(init, dtype=float).copy()
    out = np.empty((n + 1,) + r.shape) if store else None
    if store:
        out[0] = r
    if on_step is not None:
        on_step(0, r)
    MT_const = None
    if drift is None:
        MT_const = band_transpose(_implicit(generator_band(grid, a, None, bc, scheme), dt))
    for k in range(n):
        MT = MT_const if MT_const is not None else band_transpose(
            _implicit(generator_band(grid, a, drift[k], bc, scheme), dt))
        rhs = r if forcing is None else r + dt * forcing(k, r)
        r = _solve(MT, rhs)
        if store:
            out[k + 1] = r
        if on_step is not None:
            on_step(k + 1, r)
    return out if store else r


def solve_backward_linear(coeffs: LinearPDECoefficients, sigma, mesh: TimeMesh, grid: Grid1D,
                          bc=BC_QUADRATIC, scheme=HYBRID, growth_bound=None) -> ScalarField:
    """Solve -dJ/ds + A J - g . DJ = l backward from J(T) = l_T."""
    a = diffusion_coefficient(sigma)
    g = field_values(coeffs.drift, mesh, grid)
    l = field_values(coeffs.source, mesh, grid)
    lT = terminal_values(coeffs.terminal, grid)
    x = grid.nodes
    for name, arr, pw in (("drift", g, 1), ("source", l, 2)):
        if arr is not None:
            if not np.all(np.isfinite(arr)):
                raise GrowthViolation(f"{name} has non-finite values")
            if growth_bound is not None:
                r = np.max(np.abs(arr) / (growth_bound * (1 + np.abs(x) ** pw)))
                if r > 1:
                    raise GrowthViolation(f"{name} exceeds the growth bound (ratio {r:.3g})")
    if not np.all(np.isfinite(lT)):
        raise GrowthViolation("terminal data has non-finite values")
    if growth_bound is not None and np.max(np.abs(lT) / (growth_bound * (1 + x ** 2))) > 1:
        raise GrowthViolation("terminal data exceeds the growth bound")
    vals = backward_sweep(a, grid, mesh, lT, g, l, bc, scheme)
    return ScalarField(mesh, grid, vals)


def forward_fp_matrix(grid: Grid1D, a: float, b: np.ndarray, dt: float, scheme=HYBRID):
    """(1,1)-banded matrix W + dt K of one implicit finite-volume step.

    Face flux F = b_f m_face - a/2 (m_{i+1} - m_i)/dx; boundary faces carry
    no diffusion and only outgoing advection.
    """
    N, dx = grid.n_points, grid.dx
    w = grid.weights
    bf = 0.5 * (b[:-1] + b[1:])
    if scheme == HYBRID:
        theta = np.where(np.abs(bf) * dx <= a, 0.5, np.where(bf > 0, 1.0, 0.0))
    else:
        theta = np.where(bf > 0, 1.0, 0.0)
    cL = bf * theta + 0.5 * a / dx
    cR = bf * (1 - theta) - 0.5 * a / dx
    ab = np.zeros((3, N))  # ab[1 + i - j, j]
    ab[1] = w
    # row i gets +F_{i+1/2}, row i+1 gets -F_{i+1/2}
    ab[1, :-1] += dt * cL
    ab[0, 1:] += dt * cR
    ab[2, :-1] += -dt * cL
    ab[1, 1:] += -dt * cR
    out_l = max(-b[0], 0.0)
    out_r = max(b[-1], 0.0)
    ab[1, 0] += dt * out_l
    ab[1, -1] += dt * out_r
    return ab, out_l, out_r


def solve_forward_fp(drift_field, sigma, mesh: TimeMesh, grid: Grid1D, m0: GridDensity,
                     leak_tol=LEAK_TOL, scheme=HYBRID) -> MeasureFlow:
    """Conservative implicit finite-volume Fokker-Planck flow.

    Mass is conserved to rounding; whatever the drift carries through the
    box edges is accumulated as leak and MassLeak is raised past leak_tol.
    """
    if m0.grid != grid:
        raise MeshMismatch("initial density lives on another grid")
    a = diffusion_coefficient(sigma)
    b_all = field_values(drift_field if drift_field is not None else 0.0, mesh, grid)
    dt = mesh.dt
    w = grid.weights
    m = m0.values.copy()
    slices = [GridDensity(grid, m)]
    leak = 0.0
    for k in range(mesh.n_steps):
        ab, ol, orr = forward_fp_matrix(grid, a, b_all[k + 1], dt, scheme)
        try:
            m = solve_banded((1, 1), ab, w * m, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise LinearSolveFailure(str(exc)) from exc
        leak += dt * (ol * m[0] + orr * m[-1])
        m = np.maximum(m, 0.0)
        slices.append(GridDensity(grid, m))
        if leak > leak_tol:
            raise MassLeak(f"cumulative boundary leak {leak:.3g} exceeds {leak_tol}")
    check_leak(slices[-1], "forward flow")
    return MeasureFlow(mesh, slices, "grid")


def tabulate_green(drift_field, sigma, mesh: TimeMesh, grid: Grid1D, s_index: int,
                   bc=BC_QUADRATIC, scheme=HYBRID) -> GreenTable:
    """G(tau, z; s, zeta) for tau <= s = nodes[s_index], one column per zeta.

    The discrete delta is e_zeta / w_zeta (1/dx at interior nodes), the exact
    adjoint of nodal evaluation under trapezoid weights.
    """
    if not 0 <= s_index <= mesh.n_steps:
        raise MeshMismatch("s_index outside mesh")
    a = diffusion_coefficient(sigma)
    term = np.diag(1.0 / grid.weights)
    if s_index == 0:
        return GreenTable(TimeMesh(mesh.t, mesh.t + mesh.dt, 1), grid, term[None])
    sub = mesh.head(s_index)
    g = field_values(drift_field, mesh, grid)
    g = None if g is None else g[:s_index + 1]
    vals = backward_sweep(a, grid, sub, term, g, None, bc, scheme)
    return GreenTable(sub, grid, vals)


def green_rows(drift_field, sigma, mesh: TimeMesh, grid: Grid1D, z_index,
               bc=BC_QUADRATIC, scheme=HYBRID) -> np.ndarray:
    """G(t, z; s_k, zeta) for all k and zeta, for start nodes z_index.

    Shape (n_t+1, len(z_index), N).
    """
    a = diffusion_coefficient(sigma)
    z_index = np.atleast_1d(z_index)
    init = np.zeros((grid.n_points, z_index.size))
    init[z_index, np.arange(z_index.size)] = 1.0
    g = field_values(drift_field, mesh, grid)
    r = adjoint_sweep(a, grid, mesh, init, g, None, bc, scheme)
    return np.transpose(r, (0, 2, 1)) / grid.weights
