"""Problem data for mean-field-type control, built-in families and the
sampled audit of the growth and compatibility assumptions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import AssumptionViolation, SingularSigma, Unsupported
from .measure import MeasureFunctional, ParticleEnsemble, integrate_against, moments

LQ_MEANFIELD = "LQ_MEANFIELD"
COLE_HOPF = "COLE_HOPF"
CUSTOM = "CUSTOM"
FAMILIES = (LQ_MEANFIELD, COLE_HOPF, CUSTOM)

COMPAT_TOL = 1e-10
AUDIT_SEED = 20231
AUDIT_X = 8.0
AUDIT_P = 10.0


@dataclass(frozen=True)
class AssumptionConstants:
    c: float
    c_T: float
    delta: float
    lam: float = 0.0
    gamma: float = 4.0
    C_global: Optional[float] = None  # the non-constructive C(lambda, T); None = fit

    def __post_init__(self):
        if not self.c > 0 or not self.delta > 0:
            raise ValueError("c and delta must be positive")
        if self.c_T < 0 or self.lam < 0:
            raise ValueError("c_T and lambda must be non-negative")
        if self.C_global is not None and not self.C_global > 0:
            raise ValueError("C_global must be positive")

    def check_gamma(self, dim: int):
        if not self.gamma > dim / 2 + 3:
            raise ValueError(f"gamma must exceed dim/2 + 3 = {dim / 2 + 3}")


@dataclass(frozen=True)
class BuiltinFamily:
    tag: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in FAMILIES:
            raise ValueError(f"unknown family {self.tag!r}")

    def get(self, key, default):
        return float(self.params.get(key, default))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    dim: int
    horizon: Tuple[float, float]
    sigma: np.ndarray
    hamiltonian: Callable
    hamiltonian_dp: Callable
    hamiltonian_dx: Callable
    running_cost: Callable
    running_cost_dv: Callable
    minimizer: Callable
    terminal_h: Callable
    terminal_dh: Callable
    terminal_d2h: Callable
    mf_running: MeasureFunctional
    mf_terminal: MeasureFunctional
    constants: AssumptionConstants
    hamiltonian_dpp: Optional[Callable] = None
    family: BuiltinFamily = BuiltinFamily(CUSTOM)
    convex: bool = False  # data claims the convexity assumption (lambda > 0 etc.)

    def __post_init__(self):
        sig = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", sig)
        t, T = self.horizon
        if not (T > t >= 0):
            raise ValueError("horizon must satisfy T > t >= 0")
        object.__setattr__(self, "horizon", (float(t), float(T)))
        if sig.shape != (self.dim, self.dim):
            raise ValueError("sigma must be dim x dim")

    @property
    def a(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    @property
    def a_scalar(self) -> float:
        if self.dim != 1:
            raise Unsupported("reference numerics need dim = 1")
        return float(self.a[0, 0])

    @property
    def sigma_scalar(self) -> float:
        if self.dim != 1:
            raise Unsupported("reference numerics need dim = 1")
        return float(self.sigma[0, 0])

    @property
    def trace_a(self) -> float:
        return float(np.trace(self.a))

    @property
    def t(self) -> float:
        return self.horizon[0]

    @property
    def T(self) -> float:
        return self.horizon[1]

    @property
    def decoupled(self) -> bool:
        return self.family.tag == COLE_HOPF or (
            self.family.tag == LQ_MEANFIELD and self.family.get("q_bar", 1.0) == 0.0
            and self.family.get("q_bar_T", 1.0) == 0.0)

    def with_horizon(self, t, T) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, horizon=(float(t), float(T)))

    def dpp(self, s, x, p, h=1e-5):
        if self.hamiltonian_dpp is not None:
            return self.hamiltonian_dpp(s, x, p)
        return (self.hamiltonian_dp(s, x, p + h) - self.hamiltonian_dp(s, x, p - h)) / (2 * h)

    def terminal_value(self, m, x):
        return self.terminal_h(x) + self.mf_terminal.dnu(m, x)

    def terminal_gradient(self, m, x):
        return self.terminal_dh(x) + self.mf_terminal.dnu_dx(m, x)


def _check_sigma(sigma):
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sig.shape[0] != sig.shape[1]:
        raise SingularSigma("sigma must be square")
    a = sig @ sig.T
    ev = np.linalg.eigvalsh(a)
    if ev.min() <= 1e-12 * max(1.0, ev.max()):
        raise SingularSigma(f"a = sigma sigma^T is singular (smallest eigenvalue {ev.min():.3g})")
    return sig


def _quadratic_control():
    """l = |v|^2/2 gives H = -|p|^2/2 and v_hat = -p."""
    return dict(
        hamiltonian=lambda s, x, p: -0.5 * np.asarray(p, dtype=float) ** 2,
        hamiltonian_dp=lambda s, x, p: -np.asarray(p, dtype=float),
        hamiltonian_dx=lambda s, x, p: np.zeros(np.broadcast(np.asarray(x), np.asarray(p)).shape),
        hamiltonian_dpp=lambda s, x, p: -np.ones(np.broadcast(np.asarray(x), np.asarray(p)).shape),
        running_cost=lambda s, x, v: 0.5 * np.asarray(v, dtype=float) ** 2,
        running_cost_dv=lambda s, x, v: np.asarray(v, dtype=float),
        minimizer=lambda s, x, p: -np.asarray(p, dtype=float),
    )


def _mean(m):
    return moments(m, 1)


def mean_square_functional(weight: float) -> MeasureFunctional:
    """F(m) = weight/2 (int xi dm)^2 and its derivatives."""
    q = float(weight)
    return MeasureFunctional(
        value=lambda m: 0.5 * q * _mean(m) ** 2,
        dnu=lambda m, x: q * _mean(m) * np.asarray(x, dtype=float),
        dnu_dx=lambda m, x: q * _mean(m) * np.ones_like(np.asarray(x, dtype=float)),
        dnu_dxx=lambda m, x: np.zeros_like(np.asarray(x, dtype=float)),
        d2nu=lambda m, x, z: q * np.asarray(x, float) * np.asarray(z, float),
        d2nu_dz=lambda m, x, z: q * np.asarray(x, float) * np.ones_like(np.asarray(z, float)),
    )


def build_model(family: BuiltinFamily, horizon, sigma, constants: AssumptionConstants,
                custom: Optional[dict] = None, validate: bool = True) -> ModelSpec:
    """Assemble a ModelSpec and check it at the fixed audit sample.

    For CUSTOM, `custom` supplies the ModelSpec callables by field name.
    Compatibility of v_hat with l and H, and the growth bound on H, are
    enforced; violations raise AssumptionViolation.
    """
    sig = _check_sigma(sigma)
    dim = sig.shape[0]
    if dim != 1:
        raise Unsupported("built-in numerics target dim = 1")
    constants.check_gamma(dim)
    if family.tag == COLE_HOPF:
        k = family.get("curvature", 1.0)
        if not k > 0:
            raise ValueError("Cole-Hopf curvature must be positive")
        parts = dict(
            _quadratic_control(),
            terminal_h=lambda x: 0.5 * k * np.asarray(x, dtype=float) ** 2,
            terminal_dh=lambda x: k * np.asarray(x, dtype=float),
            terminal_d2h=lambda x: k * np.ones_like(np.asarray(x, dtype=float)),
            mf_running=MeasureFunctional.zero(),
            mf_terminal=MeasureFunctional.zero(),
        )
        convex = True
    elif family.tag == LQ_MEANFIELD:
        hT = family.get("h_T", 1.0)
        parts = dict(
            _quadratic_control(),
            terminal_h=lambda x: 0.5 * hT * np.asarray(x, dtype=float) ** 2,
            terminal_dh=lambda x: hT * np.asarray(x, dtype=float),
            terminal_d2h=lambda x: hT * np.ones_like(np.asarray(x, dtype=float)),
            mf_running=mean_square_functional(family.get("q_bar", 1.0)),
            mf_terminal=mean_square_functional(family.get("q_bar_T", 1.0)),
        )
        convex = hT >= 0 and family.get("q_bar", 1.0) >= 0 and family.get("q_bar_T", 1.0) >= 0
    else:
        if custom is None:
            raise ValueError("CUSTOM family needs callables")
        parts = dict(custom)
        convex = bool(parts.pop("convex", False))
    model = ModelSpec(dim=dim, horizon=tuple(horizon), sigma=sig, constants=constants,
                      family=family, convex=convex, **parts)
    if validate:
        _enforce(model)
    return model


def _audit_sample(model: ModelSpec, budget: int):
    rng = np.random.default_rng(AUDIT_SEED)
    t, T = model.horizon
    s = rng.uniform(t, T, budget)
    x = rng.uniform(-AUDIT_X, AUDIT_X, budget)
    p = rng.uniform(-AUDIT_P, AUDIT_P, budget)
    # pin the corners so large |x|, |p| are always probed
    corners = np.array([[AUDIT_X, AUDIT_P], [-AUDIT_X, -AUDIT_P], [0.0, AUDIT_P],
                        [AUDIT_X, 0.0], [0.0, 0.0]])
    k = min(len(corners), budget)
    x[:k] = corners[:k, 0]
    p[:k] = corners[:k, 1]
    return s, x, p


def _probe_measures():
    """Measures with bounded first and second moments used by the audit."""
    out = []
    for mean in (-1.0, 0.0, 1.0):
        out.append(ParticleEnsemble.uniform(mean + np.array([-0.5, 0.0, 0.5])))
    return out


def _enforce(model: ModelSpec, budget: int = 256):
    s, x, p = _audit_sample(model, budget)
    vh = model.minimizer(s, x, p)
    foc = np.abs(model.running_cost_dv(s, x, vh) + p)
    i = int(np.argmax(foc))
    if foc[i] > COMPAT_TOL * (1 + abs(p[i])):
        raise AssumptionViolation("minimizer first-order condition", (s[i], x[i], p[i]), foc[i])
    dp = np.abs(model.hamiltonian_dp(s, x, p) - vh)
    i = int(np.argmax(dp))
    if dp[i] > COMPAT_TOL * (1 + abs(p[i])):
        raise AssumptionViolation("D_pH = v_hat", (s[i], x[i], p[i]), dp[i])
    c, d = model.constants.c, model.constants.delta
    r = np.abs(model.hamiltonian(s, x, p)) / (c * (1 + x ** 2) + 0.5 * d * p ** 2)
    i = int(np.argmax(r))
    if r[i] > 1 + 1e-12:
        raise AssumptionViolation("H growth bound", (s[i], x[i], p[i]), r[i])


@dataclass
class AuditReport:
    ratios: Dict[str, float]
    worst_points: Dict[str, tuple]
    compatibility: Dict[str, float]
    convexity: Dict[str, bool]

    @property
    def flagged(self):
        out = [k for k, v in self.ratios.items() if v > 1 + 1e-12]
        out += [k for k, v in self.compatibility.items() if v > COMPAT_TOL]
        return out

    @property
    def passed(self) -> bool:
        return not self.flagged

    def as_dict(self):
        return {"ratios": self.ratios, "worst_points": {k: list(v) for k, v in self.worst_points.items()},
                "compatibility": self.compatibility, "convexity": self.convexity,
                "flagged": self.flagged}


def _ratio(num, den):
    num = np.abs(np.asarray(num, dtype=float))
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 0.0))
    return r


def audit_assumptions(model: ModelSpec, sample_budget: int = 1000) -> AuditReport:
    """Sample the growth, compatibility and convexity assumptions.

    Ratios are observed value over allowed bound; anything above one is
    flagged.  The measure-dependent bounds are probed on a few measures with
    means in [-1, 1]; the report is evidence, not a supremum.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    k = model.constants
    s, x, p = _audit_sample(model, sample_budget)
    ax = np.abs(x)
    checks = {
        "H_growth": (model.hamiltonian(s, x, p), k.c * (1 + x ** 2) + 0.5 * k.delta * p ** 2),
        "DpH_growth": (model.hamiltonian_dp(s, x, p), k.c * (1 + ax + np.abs(p))),
        "DxH_growth": (model.hamiltonian_dx(s, x, p), k.c * (1 + ax + np.abs(p))),
        "h_growth": (model.terminal_h(x), k.c_T * (1 + x ** 2)),
        "Dh_growth": (model.terminal_dh(x), k.c_T * (1 + ax)),
        "D2h_bound": (model.terminal_d2h(x), k.c_T * np.ones_like(x)),
    }
    for j, m in enumerate(_probe_measures()):
        m2 = moments(m, 2)
        for name, F, cc in (("F", model.mf_running, k.c), ("F_T", model.mf_terminal, k.c_T)):
            key = f"{name}_growth"
            num, den = checks.get(key, (np.empty(0), np.empty(0)))
            checks[key] = (np.append(num, F.value(m)), np.append(den, cc * (1 + m2)))
            for lab, fn, bound in ((f"d{name}_growth", F.dnu, cc * (1 + x ** 2)),
                                   (f"Dd{name}_growth", F.dnu_dx, cc * (1 + ax))):
                num, den = checks.get(lab, (np.empty(0), np.empty(0)))
                checks[lab] = (np.append(num, fn(m, x)), np.append(den, bound))
            if name == "F_T":
                num, den = checks.get("D2dF_T_bound", (np.empty(0), np.empty(0)))
                checks["D2dF_T_bound"] = (np.append(num, F.second_x(m, x)),
                                          np.append(den, cc * np.ones_like(x)))
    ratios, worst = {}, {}
    for key, (num, den) in checks.items():
        r = _ratio(num, den)
        i = int(np.argmax(r))
        ratios[key] = float(r[i])
        worst[key] = (float(s[i % s.size]), float(x[i % x.size]), float(p[i % p.size]))

    vh = model.minimizer(s, x, p)
    compat = {
        "minimizer_foc": float(np.max(np.abs(model.running_cost_dv(s, x, vh) + p) / (1 + np.abs(p)))),
        "DpH_equals_vhat": float(np.max(np.abs(model.hamiltonian_dp(s, x, p) - vh) / (1 + np.abs(p)))),
    }
    convex = {}
    e = 0.5
    if k.lam > 0:
        second = (model.running_cost(s, x, vh + e) + model.running_cost(s, x, vh - e)
                  - 2 * model.running_cost(s, x, vh))
        convex["l_strongly_convex_in_v"] = bool(np.all(second >= 2 * k.lam * e * e * (1 - 1e-9)))
        secx = (model.running_cost(s, x + e, vh) + model.running_cost(s, x - e, vh)
                - 2 * model.running_cost(s, x, vh))
        convex["l_convex_in_x"] = bool(np.all(secx >= -1e-12))
    convex["h_convex"] = bool(np.all(model.terminal_h(x + e) + model.terminal_h(x - e)
                                     - 2 * model.terminal_h(x) >= -1e-12))
    ok = True
    for m in _probe_measures():
        for F in (model.mf_running, model.mf_terminal):
            ok &= bool(np.all(F.dnu(m, x + e) + F.dnu(m, x - e) - 2 * F.dnu(m, x) >= -1e-12))
    convex["dF_dnu_convex"] = ok
    return AuditReport(ratios, worst, compat, convex)


def convexity_holds(model: ModelSpec, budget=256) -> bool:
    """Whether the global-in-time regime may be requested for this model."""
    if not (model.convex and model.constants.lam > 0):
        return False
    rep = audit_assumptions(model, budget)
    return all(rep.convexity.values())
