"""Independent ground truth: the Cole-Hopf solution of the decoupled HJB
equation and the Riccati/mean ODE system of the LQ mean-field family.

Only quadrature, an ODE integrator and plain Euler Monte Carlo are used
here; nothing from the PDE solvers is imported.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import logsumexp

from .errors import KernelOverflow, ShootingDivergence
from .fields import ScalarField, interp_linear
from .measure import Grid1D, GridDensity, ParticleEnsemble, TimeMesh, sample_measure
from .rng import STREAM_PATH, block_generator, map_blocks

GH_NODES = 160
ODE_RTOL = 1e-13
ODE_ATOL = 1e-14


def cole_hopf_value(curvature, a, tau, x):
    """Closed form for h = curvature x^2/2:  k x^2 / (2(1+k tau)) + a/2 ln(1+k tau)."""
    k = float(curvature)
    tau = np.asarray(tau, dtype=float)
    x = np.asarray(x, dtype=float)
    return k * x ** 2 / (2 * (1 + k * tau)) + 0.5 * a * np.log1p(k * tau)


@dataclass(frozen=True)
class ColeHopfOracle:
    curvature: float
    a: float
    T: float
    terminal: Optional[Callable] = None

    def h(self, x):
        if self.terminal is not None:
            return self.terminal(x)
        return 0.5 * self.curvature * np.asarray(x, dtype=float) ** 2

    def value(self, s, x):
        """V* = -a ln w with w(s) the heat semigroup applied to exp(-h/a).

        Gauss-Hermite quadrature in log space.
        """
        x = np.asarray(x, dtype=float)
        tau = self.T - float(s)
        if tau <= 0:
            return np.asarray(self.h(x), dtype=float)
        u, wq = np.polynomial.hermite.hermgauss(GH_NODES)
        y = x[..., None] + np.sqrt(2 * self.a * tau) * u
        expo = -np.asarray(self.h(y), dtype=float) / self.a
        if not np.all(np.isfinite(expo)) or np.max(expo) > 700:
            raise KernelOverflow("terminal exponent exceeds float range")
        logw = logsumexp(expo + np.log(wq), axis=-1) - 0.5 * np.log(np.pi)
        return -self.a * logw

    def pde_residual(self, s, x, h=1e-3):
        """-V_s - a/2 V_xx + V_x^2/2 by fourth-order differences."""
        def d1(f, z):
            return (-f(z + 2 * h) + 8 * f(z + h) - 8 * f(z - h) + f(z - 2 * h)) / (12 * h)
        x = np.asarray(x, dtype=float)
        Vs = (-self.value(s + 2 * h, x) + 8 * self.value(s + h, x)
              - 8 * self.value(s - h, x) + self.value(s - 2 * h, x)) / (12 * h)
        Vx = d1(lambda z: self.value(s, z), x)
        Vxx = (-self.value(s, x + 2 * h) + 16 * self.value(s, x + h) - 30 * self.value(s, x)
               + 16 * self.value(s, x - h) - self.value(s, x - 2 * h)) / (12 * h * h)
        return -Vs - 0.5 * self.a * Vxx + 0.5 * Vx ** 2


def cole_hopf_solution(curvature, a, horizon, grid: Grid1D, mesh: TimeMesh,
                       terminal: Optional[Callable] = None) -> ScalarField:
    if terminal is None and not curvature > 0:
        raise ValueError("curvature must be positive")
    orc = ColeHopfOracle(float(curvature), float(a), float(horizon[1]), terminal)
    x = grid.nodes
    vals = np.stack([orc.value(s, x) for s in mesh.nodes])
    return ScalarField(mesh, grid, vals)


@dataclass(frozen=True, eq=False)
class LQClosedForm:
    horizon: tuple
    params: dict
    a: float
    m0_mean: float
    m0_var: Optional[float]
    sol: object          # dense ODE solution on [t, T]
    sol_unit: object     # same system with unit initial mean (for rho, kappa)
    k_T: float
    Q_T: float
    shooting_residuals: tuple

    @property
    def h_T(self):
        return float(self.params.get("h_T", 1.0))

    @property
    def q_bar(self):
        return float(self.params.get("q_bar", 1.0))

    @property
    def q_bar_T(self):
        return float(self.params.get("q_bar_T", 1.0))

    def P(self, s):
        s = np.asarray(s, dtype=float)
        return self.h_T / (1.0 + self.h_T * (self.horizon[1] - s))

    def _eval(self, sol, s, i):
        s = np.asarray(s, dtype=float)
        return sol.sol(s.ravel())[i].reshape(s.shape)

    def mbar(self, s):
        return self._eval(self.sol, s, 0)

    def r(self, s):
        return self._eval(self.sol, s, 1)

    def k(self, s):
        return self._eval(self.sol, s, 2) - self.k_T

    def variance(self, s):
        if self.m0_var is None:
            raise ValueError("initial variance not supplied")
        return self._eval(self.sol, s, 3)

    def V(self, s, x):
        s = np.asarray(s, dtype=float)
        return 0.5 * self.P(s) * np.asarray(x) ** 2 + self.r(s) * x + self.k(s)

    def DV(self, s, x):
        return self.P(s) * np.asarray(x) + self.r(s)

    def rho(self, s):
        """Bilinear coefficient of dV/dnu: V_bar = rho(s) x z + kappa(s) z."""
        return self._eval(self.sol_unit, s, 1)

    def kappa(self, s):
        Q = self._eval(self.sol_unit, s, 2)
        return -self.m0_mean * (self.Q_T - Q)

    def phi(self) -> float:
        """Phi(t, m0): running cost along the flow plus terminal terms."""
        if self.m0_var is None:
            raise ValueError("initial variance not supplied")
        T = self.horizon[1]
        y = self.sol.sol(T)
        mT, vT, cost = y[0], y[3], y[4]
        return float(cost + 0.5 * self.h_T * (vT + mT ** 2) + 0.5 * self.q_bar_T * mT ** 2)

    def dphi_dmean(self) -> float:
        """Directional derivative of Phi(t, .) along a unit mean shift."""
        t = self.horizon[0]
        return float(self.P(t) * self.m0_mean + self.r(t))

    def ode_residuals(self, nodes=None, h=1e-3) -> float:
        """Max ODE residual by fourth-order differences of the dense output."""
        t, T = self.horizon
        if nodes is None:
            nodes = np.linspace(t + 2 * h, T - 2 * h, 41)
        y = lambda s: self.sol.sol(s)
        dy = (-y(nodes + 2 * h) + 8 * y(nodes + h) - 8 * y(nodes - h) + y(nodes - 2 * h)) / (12 * h)
        rhs = np.stack([self._rhs(s, y(s)) for s in nodes], axis=1)
        P = self.P
        dP = (-P(nodes + 2 * h) + 8 * P(nodes + h) - 8 * P(nodes - h) + P(nodes - 2 * h)) / (12 * h)
        res_P = np.max(np.abs(dP - P(nodes) ** 2))
        return float(max(np.max(np.abs(dy[:3] - rhs[:3])), res_P))

    def _rhs(self, s, y):
        return _lq_rhs(s, y, self.P, self.q_bar, self.a)


def _lq_rhs(s, y, P, q, a):
    m, r, kint, var, cost = y
    p = P(s)
    return np.array([
        -(p * m + r),
        p * r - q * m,
        0.5 * r ** 2 - 0.5 * a * p,
        -2 * p * var + a,
        0.5 * (p ** 2 * (var + m ** 2) + 2 * p * r * m + r ** 2) + 0.5 * q * m ** 2,
    ])


def _shoot(params, horizon, m0_mean, m0_var, a, P, tol=1e-12, max_iter=20):
    t, T = horizon
    q, qT = float(params.get("q_bar", 1.0)), float(params.get("q_bar_T", 1.0))
    var0 = 0.0 if m0_var is None else float(m0_var)

    def run(r0):
        return solve_ivp(_lq_rhs, (t, T), [m0_mean, r0, 0.0, var0, 0.0], method="DOP853",
                         rtol=ODE_RTOL, atol=ODE_ATOL, dense_output=True, args=(P, q, a))

    def resid(sol):
        yT = sol.y[:, -1]
        return yT[1] - qT * yT[0]

    # the (mbar, r) system is linear, so secant steps converge at once;
    # iterate anyway to absorb integration error
    r_a, r_b = 0.0, 1.0
    sa, sb = run(r_a), run(r_b)
    ra, rb = resid(sa), resid(sb)
    history = [ra, rb]
    for _ in range(max_iter):
        if abs(rb) <= tol * max(1.0, abs(qT * sb.y[0, -1])):
            return sb, history
        if rb == ra:
            break
        r_new = r_b - rb * (r_b - r_a) / (rb - ra)
        r_a, ra, sa = r_b, rb, sb
        r_b = r_new
        sb = run(r_b)
        rb = resid(sb)
        history.append(rb)
    if abs(rb) <= 1e-10:
        return sb, history
    raise ShootingDivergence("forward-backward shooting did not converge", history)


def lq_closed_form(family_params: dict, horizon, m0_mean: float, a: float = 1.0,
                   m0_var: Optional[float] = None) -> LQClosedForm:
    t, T = map(float, horizon)
    hT = float(family_params.get("h_T", 1.0))
    P = lambda s: hT / (1.0 + hT * (T - np.asarray(s, dtype=float)))
    sol, hist = _shoot(family_params, (t, T), float(m0_mean), m0_var, a, P)
    # unit-mean run gives rho = dr/dmbar0 (the system is homogeneous in mbar0)
    unit, _ = _shoot(family_params, (t, T), 1.0, None, a, P)

    def q_rhs(s, y):
        return [unit.sol(s)[1] ** 2]
    Qsol = solve_ivp(q_rhs, (t, T), [0.0], method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL,
                     dense_output=True)

    class _Unit:
        def sol(self, s):
            u = unit.sol(s)
            return np.stack([u[0], u[1], Qsol.sol(s)[0]])
    kT = sol.sol(T)[2]
    cf = LQClosedForm((t, T), dict(family_params), float(a), float(m0_mean), m0_var, sol, _Unit(),
                      float(kT), float(Qsol.sol(T)[0]), tuple(hist))
    return cf


def brute_force_dual(model, DV, phi: Callable, m0, s_index: int, n_paths: int, seed: int = 0,
                     workers=None):
    """Plain Monte-Carlo E[phi(X_s)] along Euler paths of the controlled SDE.

    Returns (estimate, standard error).
    """
    if n_paths < 1000:
        raise ValueError("n_paths must be >= 1000")
    mesh, grid = DV.mesh, DV.grid
    sig = model.sigma_scalar
    dt = mesh.dt
    x0 = sample_measure(m0, n_paths, seed, workers)
    times = mesh.nodes

    def run(b, sl):
        rng = block_generator(seed, b, STREAM_PATH + 16)
        X = x0[sl].copy()
        for k in range(s_index):
            p = interp_linear(grid, DV.values[k], X)
            X = X + model.hamiltonian_dp(times[k], X, p) * dt + sig * np.sqrt(dt) * rng.standard_normal(X.size)
        return np.asarray(phi(X), dtype=float)
    vals = np.concatenate(map_blocks(run, n_paths, workers))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths))
