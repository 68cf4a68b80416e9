"""Closed-form a priori bounds: feasibility windows, the eta* root, the
quadratic majorants z and z_bar, and pi_gamma weighted norms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import bisect

from .errors import BracketFailure, InfeasibleHorizon
from .fields import ScalarField, weighted_l2
from .measure import Grid1D, TimeMesh
from .model import AssumptionConstants

SMALL_TIME = "SMALL_TIME"
GLOBAL_CONVEX = "GLOBAL_CONVEX"
ETA_BRACKET = (1e-6, 1e3)


def eta_function(eta):
    eta = np.asarray(eta, dtype=float)
    return (1.0 / eta) * (1.0 + 1.0 / (4.0 * eta)) ** 2 - 1.0 - 1.0 / eta


def eta_star(tolerance: float = 1e-15) -> float:
    """Root of the decreasing function l(eta) by bisection on (1e-6, 1e3)."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    lo, hi = ETA_BRACKET
    if not (eta_function(lo) > 0 > eta_function(hi)):
        raise BracketFailure("l(eta) does not change sign on the bracket")
    root = bisect(eta_function, lo, hi, xtol=tolerance, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(eta_function(root)) > 1e-12:
        raise BracketFailure(f"bisection residual {eta_function(root):.3g} above 1e-12")
    return float(root)


def _K(eta):
    return 1.0 / eta + 1.0 / (4.0 * eta ** 2)


def window_V(c, c_T, delta) -> float:
    return (0.5 * np.pi - np.arctan(2 * c_T * np.sqrt(delta / c))) / (2 * np.sqrt(delta * c))


def window_DV(c, c_T, eta=None) -> float:
    eta = eta_star() if eta is None else eta
    return 1.0 / (2 * c * eta * (2 * c_T + _K(eta)))


def feasibility_windows(constants: AssumptionConstants):
    k = constants
    return float(window_V(k.c, k.c_T, k.delta)), float(window_DV(k.c, k.c_T))


@dataclass(frozen=True, eq=False)
class MajorantParams:
    horizon: tuple
    constants: AssumptionConstants
    trace_a: float
    eta_star: float
    window_V: float
    window_DV: float
    global_mode: bool
    beta: Optional[Callable]
    mu: Optional[Callable]
    beta_bar: Optional[Callable]
    mu_bar: Optional[Callable]

    @property
    def feasible_V(self) -> bool:
        return self.beta is not None

    @property
    def feasible_DV(self) -> bool:
        return self.beta_bar is not None

    def z(self, s, x):
        return 0.5 * self.beta(s) * np.asarray(x) ** 2 + self.mu(s)

    def z_bar(self, s, x):
        return 0.5 * self.beta_bar(s) * np.asarray(x) ** 2 + self.mu_bar(s)

    def as_dict(self):
        return {"eta_star": self.eta_star, "window_V": self.window_V, "window_DV": self.window_DV,
                "global_mode": self.global_mode, "feasible_V": self.feasible_V,
                "feasible_DV": self.feasible_DV, "horizon": list(self.horizon)}


def _small_time(k: AssumptionConstants, T: float, tra: float, eta: float, length: float):
    c, cT, d = k.c, k.c_T, k.delta
    th0 = np.arctan(2 * cT * np.sqrt(d / c))
    om = 2 * np.sqrt(d * c)
    beta = mu = beta_bar = mu_bar = None
    if length < window_V(c, cT, d):
        def beta(s):
            return 2 * np.sqrt(c / d) * np.tan(th0 + om * (T - np.asarray(s, dtype=float)))

        def mu(s):
            tau = T - np.asarray(s, dtype=float)
            return 2 * cT + 2 * c * tau + tra / (2 * d) * np.log(np.cos(th0) / np.cos(th0 + om * tau))
    K = _K(eta)
    if length < window_DV(c, cT, eta):
        def beta_bar(s):
            tau = T - np.asarray(s, dtype=float)
            return 1.0 / (1.0 / (2 * cT + K) - 2 * c * eta * tau) - K

        kk = c * (4 + 1 / eta)
        f0 = c * (1 + 1 / eta)

        def _mu_bar_scalar(s):
            # solution of -mu' - tr(a) beta_bar / 2 = f0 + kk mu, mu(T) = c_T
            tau = T - s
            integ, _ = quad(lambda r: (f0 + 0.5 * tra * beta_bar(r)) * np.exp(kk * (r - s)),
                            s, T, epsabs=1e-13, epsrel=1e-13, limit=200)
            return cT * np.exp(kk * tau) + integ

        def mu_bar(s):
            s_arr = np.asarray(s, dtype=float)
            out = np.vectorize(_mu_bar_scalar, otypes=[float])(s_arr)
            return out if s_arr.ndim else float(out)
    return beta, mu, beta_bar, mu_bar


def _global(k: AssumptionConstants, T: float, tra: float, C: float):
    cT = k.c_T

    def beta(s):
        return 4 * cT + 2 * C * (T - np.asarray(s, dtype=float))

    def mu(s):
        tau = T - np.asarray(s, dtype=float)
        return 2 * cT + C * tau + tra * (2 * cT * tau + 0.5 * C * tau ** 2)

    # |DV| <= C(1+|x|) gives |DV|^2/2 <= C^2 (1+|x|^2)
    def beta_bar(s):
        return np.full(np.shape(s), 2 * C ** 2) if np.ndim(s) else 2 * C ** 2

    def mu_bar(s):
        return np.full(np.shape(s), C ** 2) if np.ndim(s) else C ** 2
    return beta, mu, beta_bar, mu_bar


def majorant_params(constants: AssumptionConstants, horizon, trace_a: float = 1.0,
                    mode: str = SMALL_TIME, convexity_ok: bool = False,
                    C_global: Optional[float] = None) -> MajorantParams:
    """Majorant coefficients; infeasible pieces are left as None."""
    t, T = map(float, horizon)
    eta = eta_star()
    wV, wDV = feasibility_windows(constants)
    if mode == SMALL_TIME:
        parts = _small_time(constants, T, trace_a, eta, T - t)
        glob = False
    elif mode == GLOBAL_CONVEX:
        if not (constants.lam > 0 and convexity_ok):
            raise ValueError("GLOBAL_CONVEX needs lambda > 0 and the convexity assumption")
        C = C_global if C_global is not None else constants.C_global
        if C is None or not C > 0:
            raise ValueError("GLOBAL_CONVEX needs a positive C(lambda, T)")
        parts = _global(constants, T, trace_a, float(C))
        glob = True
    else:
        raise ValueError(f"unknown majorant mode {mode!r}")
    return MajorantParams((t, T), constants, float(trace_a), eta, wV, wDV, glob, *parts)


def majorant_fields(constants: AssumptionConstants, horizon, grid: Grid1D, mode: str = SMALL_TIME,
                    mesh: Optional[TimeMesh] = None, trace_a: float = 1.0,
                    convexity_ok: bool = False, C_global: Optional[float] = None):
    """Nodal z and z_bar on mesh x grid (one slice at s = t if no mesh)."""
    t, T = map(float, horizon)
    mp = majorant_params(constants, (t, T), trace_a, mode, convexity_ok, C_global)
    if not mp.feasible_V:
        raise InfeasibleHorizon(f"T-t = {T - t:.4g} is not below window_V = {mp.window_V:.4g}")
    if not mp.feasible_DV:
        raise InfeasibleHorizon(f"T-t = {T - t:.4g} is not below window_DV = {mp.window_DV:.4g}")
    mesh = mesh if mesh is not None else TimeMesh(t, T, 1)
    s = mesh.nodes[:, None]
    x = grid.nodes[None, :]
    z = mp.z(s, x)
    zb = 0.5 * mp.beta_bar(mesh.nodes)[:, None] * x ** 2 + mp.mu_bar(mesh.nodes)[:, None]
    return ScalarField(mesh, grid, z), ScalarField(mesh, grid, zb)


def weighted_norm(field: ScalarField, gamma: float) -> float:
    """Space-time integral of |field|^2 pi_gamma with pi_gamma = (1+x^2)^-gamma."""
    if not gamma > 0.5 + 2:
        raise ValueError("gamma must exceed n/2 + 2")
    return weighted_l2(field.values, field.grid, field.mesh.dt, gamma)


def domination_margins(V: np.ndarray, DV: np.ndarray, mesh: TimeMesh, grid: Grid1D,
                       mp: MajorantParams, slack: float = 5e-3):
    """Largest excess of |V| over z and of |DV|^2/2 over z_bar (<= 0 means dominated)."""
    s = mesh.nodes[:, None]
    x = grid.nodes[None, :]
    pad = slack * (1 + x ** 2)
    mV = float(np.max(np.abs(V) - mp.z(s, x) - pad)) if mp.feasible_V else np.inf
    if mp.feasible_DV:
        zb = 0.5 * mp.beta_bar(mesh.nodes)[:, None] * x ** 2 + mp.mu_bar(mesh.nodes)[:, None]
        mDV = float(np.max(0.5 * DV ** 2 - zb - pad))
    else:
        mDV = np.inf
    return mV, mDV


def fit_global_constant(family_params: dict, horizon, sigma: float = 1.0, m0_mean: float = 0.0,
                        x_max: float = 8.0) -> float:
    """Sampled C(lambda,T) for the LQ family from its closed form.

    The constant has no constructive formula; this is the sup over a grid of
    |DV|/(1+|x|) and (|H(DV)| + |dF/dnu|)/(1+x^2) along the oracle solution,
    which serves as a blow-up gate rather than a proof.
    """
    from .oracle import lq_closed_form
    cf = lq_closed_form(family_params, horizon, m0_mean, a=sigma ** 2)
    s = np.linspace(horizon[0], horizon[1], 201)[:, None]
    x = np.linspace(-x_max, x_max, 401)[None, :]
    P, r, mbar = cf.P(s), cf.r(s), cf.mbar(s)
    DV = P * x + r
    q = float(family_params.get("q_bar", 1.0))
    C1 = np.max(np.abs(DV) / (1 + np.abs(x)))
    C2 = np.max((0.5 * DV ** 2 + np.abs(q * mbar * x)) / (1 + x ** 2))
    return float(max(C1, C2, 1e-12))
