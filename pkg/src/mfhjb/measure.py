"""Probability measures on a truncated line: grid densities, weighted
particles, flows of either, moments, pushforward and 1-D W2."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import MeshMismatch, NonFiniteMap

LEAK_WARN = 1e-8
N_QUANTILES = 512


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        if int(self.n_points) < 3:
            raise ValueError("n_points must be >= 3")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights, which double as finite-volume cell sizes."""
        w = np.full(self.n_points, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def integrate(self, values, axis=-1):
        return np.tensordot(values, self.weights, axes=([axis], [0]))

    def core_mask(self, half_width=None):
        """Nodes in the core window, by default the middle half of the box."""
        if half_width is None:
            c = 0.5 * (self.x_min + self.x_max)
            h = 0.25 * (self.x_max - self.x_min)
            return np.abs(self.nodes - c) <= h + 1e-12
        return np.abs(self.nodes) <= half_width + 1e-12

    def index_of(self, x) -> np.ndarray:
        """Node indices of points that must coincide with nodes."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = np.rint((x - self.x_min) / self.dx).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.n_points) or \
                np.any(np.abs(self.x_min + idx * self.dx - x) > 1e-9 * max(1.0, self.dx)):
            raise MeshMismatch("points are not nodes of the grid")
        return idx

    def refined(self, factor=2) -> "Grid1D":
        return Grid1D(self.x_min, self.x_max, (self.n_points - 1) * factor + 1)


@dataclass(frozen=True)
class TimeMesh:
    t: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t:
            raise ValueError("need T > t")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")

    @classmethod
    def from_dt(cls, t, T, dt):
        return cls(float(t), float(T), max(1, int(round((T - t) / dt))))

    @property
    def dt(self) -> float:
        return (self.T - self.t) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t, self.T, self.n_steps + 1)

    def coarsen(self, k: int) -> "TimeMesh":
        if self.n_steps % k:
            raise MeshMismatch(f"{self.n_steps} steps not divisible by {k}")
        return TimeMesh(self.t, self.T, self.n_steps // k)

    def tail(self, start: int) -> "TimeMesh":
        """Sub-mesh on [nodes[start], T]."""
        if not 0 <= start < self.n_steps:
            raise MeshMismatch("start index outside mesh")
        return TimeMesh(float(self.nodes[start]), self.T, self.n_steps - start)

    def head(self, stop: int) -> "TimeMesh":
        """Sub-mesh on [t, nodes[stop]]."""
        if not 0 < stop <= self.n_steps:
            raise MeshMismatch("stop index outside mesh")
        return TimeMesh(self.t, float(self.nodes[stop]), stop)

    def refined(self, factor=2) -> "TimeMesh":
        return TimeMesh(self.t, self.T, self.n_steps * factor)

    def same_as(self, other: "TimeMesh") -> bool:
        return (self.n_steps == other.n_steps and abs(self.t - other.t) < 1e-12
                and abs(self.T - other.T) < 1e-12)


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise ValueError("density values do not match the grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("density has non-finite values")
        if v.min() < -1e-12:
            raise ValueError("density has negative values")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: Grid1D, f: Callable) -> "GridDensity":
        v = np.maximum(np.asarray(f(grid.nodes), dtype=float), 0.0)
        return cls(grid, v / grid.integrate(v))

    @classmethod
    def gaussian(cls, grid: Grid1D, mean=0.0, std=1.0) -> "GridDensity":
        return cls.from_function(grid, lambda x: np.exp(-0.5 * ((x - mean) / std) ** 2))

    def mass(self) -> float:
        return float(self.grid.integrate(self.values))

    def normalized(self) -> "GridDensity":
        return GridDensity(self.grid, self.values / self.mass())

    def boundary_density(self) -> float:
        return float(max(self.values[0], self.values[-1]))

    def cdf(self) -> np.ndarray:
        """Cumulative mass at the nodes, cell by cell (trapezoid)."""
        cell = 0.5 * self.grid.dx * (self.values[1:] + self.values[:-1])
        return np.concatenate(([0.0], np.cumsum(cell)))

    def quantile(self, u) -> np.ndarray:
        c = self.cdf()
        c = c / c[-1]
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.searchsorted(c, u, side="left"), 1, len(c) - 1)
        lo, hi = c[idx - 1], c[idx]
        frac = np.where(hi > lo, (u - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
        return self.grid.nodes[idx - 1] + np.clip(frac, 0.0, 1.0) * self.grid.dx

    def shifted(self, eps: float) -> "GridDensity":
        """Density of X + eps, by linear interpolation."""
        x = self.grid.nodes
        v = np.interp(x - eps, x, self.values, left=0.0, right=0.0)
        return GridDensity(self.grid, v * self.mass() / self.grid.integrate(v))


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    positions: np.ndarray
    weights: np.ndarray
    rng_seed: Optional[int] = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float).ravel()
        w = np.asarray(self.weights, dtype=float).ravel()
        if p.size < 1 or p.shape != w.shape:
            raise ValueError("need N >= 1 positions with matching weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, positions, rng_seed=None) -> "ParticleEnsemble":
        p = np.asarray(positions, dtype=float).ravel()
        return cls(p, np.full(p.size, 1.0 / p.size), rng_seed)

    @classmethod
    def from_log_weights(cls, positions, logw, rng_seed=None) -> "ParticleEnsemble":
        w = np.exp(logw - np.max(logw))
        w = w / w.sum()
        return cls(positions, w, rng_seed)

    @property
    def size(self) -> int:
        return self.positions.size

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    def quantile(self, u) -> np.ndarray:
        order = np.argsort(self.positions, kind="stable")
        xs = self.positions[order]
        c = np.cumsum(self.weights[order])
        idx = np.clip(np.searchsorted(c, np.asarray(u), side="left"), 0, xs.size - 1)
        return xs[idx]


Measure = Union[GridDensity, ParticleEnsemble]


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    mesh: TimeMesh
    slices: Sequence[Measure]
    representation: str = "grid"

    def __post_init__(self):
        if len(self.slices) != self.mesh.n_steps + 1:
            raise MeshMismatch("one slice per mesh node is required")
        if self.representation not in ("grid", "particles"):
            raise ValueError("representation must be 'grid' or 'particles'")
        object.__setattr__(self, "slices", tuple(self.slices))

    @property
    def grid(self) -> Optional[Grid1D]:
        s = self.slices[0]
        return s.grid if isinstance(s, GridDensity) else None

    def density_array(self) -> np.ndarray:
        if self.representation != "grid":
            raise TypeError("density_array needs a grid flow")
        return np.stack([s.values for s in self.slices])

    def tail(self, start: int) -> "MeasureFlow":
        return MeasureFlow(self.mesh.tail(start), self.slices[start:], self.representation)

    def head(self, stop: int) -> "MeasureFlow":
        return MeasureFlow(self.mesh.head(stop), self.slices[:stop + 1], self.representation)

    def subsample(self, k: int) -> "MeasureFlow":
        return MeasureFlow(self.mesh.coarsen(k), self.slices[::k], self.representation)

    def moments(self, order: int) -> np.ndarray:
        return np.array([moments(s, order) for s in self.slices])


def integrate_against(mu: Measure, phi: Callable) -> float:
    if isinstance(mu, GridDensity):
        return float(mu.grid.integrate(mu.values * phi(mu.grid.nodes)))
    return float(np.dot(mu.weights, phi(mu.positions)))


def moments(mu: Measure, order: int) -> float:
    if order < 0 or order > 4:
        raise ValueError("order must be in 0..4")
    return integrate_against(mu, lambda x: x ** order)


def moment_stderr(mu: Measure, order: int) -> float:
    """Monte-Carlo standard error of a moment; zero for grid densities.

    Uses the self-normalized (delta-method) formula, which reduces to
    std/sqrt(N) for uniform weights.
    """
    if isinstance(mu, GridDensity):
        return 0.0
    f = mu.positions ** order
    mean = np.dot(mu.weights, f)
    w = mu.weights
    if np.allclose(w, w[0]):
        n = w.size
        return float(np.std(f, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.sqrt(np.sum(w ** 2 * (f - mean) ** 2)))


def pushforward(mu: ParticleEnsemble, fmap: Callable) -> ParticleEnsemble:
    y = np.asarray(fmap(mu.positions), dtype=float)
    if y.shape != mu.positions.shape or not np.all(np.isfinite(y)):
        raise NonFiniteMap("map returned non-finite images")
    return ParticleEnsemble(y, mu.weights.copy(), mu.rng_seed)


def quantile_nodes(k=N_QUANTILES) -> np.ndarray:
    return (np.arange(k) + 0.5) / k


def wasserstein2_1d(mu: Measure, nu: Measure, n_quantiles: int = N_QUANTILES) -> float:
    """W2 via midpoint quadrature of the squared quantile difference."""
    u = quantile_nodes(n_quantiles)
    d = mu.quantile(u) - nu.quantile(u)
    return float(np.sqrt(np.mean(d * d)))


def check_leak(mu: GridDensity, label="density") -> float:
    b = mu.boundary_density()
    if b > LEAK_WARN:
        warnings.warn(f"{label}: boundary density {b:.3g} exceeds {LEAK_WARN}; widen the box",
                      RuntimeWarning, stacklevel=2)
    return b


@dataclass(frozen=True)
class MeasureFunctional:
    """A functional F(m) with its linear derivative and x-derivatives of it.

    dnu(m, x), dnu_dx(m, x), dnu_dxx(m, x); d2nu(m, x, z) and d2nu_dz are
    optional second-order data.
    """
    value: Callable
    dnu: Callable
    dnu_dx: Callable
    dnu_dxx: Optional[Callable] = None
    d2nu: Optional[Callable] = None
    d2nu_dz: Optional[Callable] = None

    @classmethod
    def zero(cls) -> "MeasureFunctional":
        z = lambda m, x: np.zeros_like(np.asarray(x, dtype=float))
        return cls(lambda m: 0.0, z, z, z,
                   lambda m, x, y: np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape),
                   lambda m, x, y: np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape))

    @classmethod
    def linear(cls, phi, dphi, d2phi) -> "MeasureFunctional":
        """F(m) = int phi dm."""
        return cls(lambda m: integrate_against(m, phi),
                   lambda m, x: phi(np.asarray(x, dtype=float)),
                   lambda m, x: dphi(np.asarray(x, dtype=float)),
                   lambda m, x: d2phi(np.asarray(x, dtype=float)),
                   lambda m, x, y: np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape),
                   lambda m, x, y: np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape))

    @property
    def has_second_order(self) -> bool:
        return self.d2nu is not None

    def second_x(self, m, x, h=1e-4):
        if self.dnu_dxx is not None:
            return self.dnu_dxx(m, x)
        return (self.dnu_dx(m, x + h) - self.dnu_dx(m, x - h)) / (2 * h)


def chain_rule_check(model, F_test: MeasureFunctional, flow: MeasureFlow, drift_field) -> float:
    """Max over interior nodes of |d/ds F(m_s) - int [D dF/dnu . v - A dF/dnu] dm_s|.

    The time derivative is a centered difference along the flow; A is the
    generator -a/2 d^2.
    """
    if not drift_field.mesh.same_as(flow.mesh):
        raise MeshMismatch("drift field and flow live on different meshes")
    a = model.a_scalar
    vals = np.array([F_test.value(m) for m in flow.slices])
    dt = flow.mesh.dt
    lhs = (vals[2:] - vals[:-2]) / (2 * dt)
    xg = drift_field.grid.nodes
    rhs = np.empty(flow.mesh.n_steps - 1)
    for n in range(1, flow.mesh.n_steps):
        m = flow.slices[n]
        v = drift_field.values[n]

        def integrand(x, m=m, v=v):
            vx = np.interp(x, xg, v)
            return F_test.dnu_dx(m, x) * vx + 0.5 * a * F_test.second_x(m, x)
        rhs[n - 1] = integrate_against(m, integrand)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def sample_measure(mu: Measure, n: int, seed: int, workers=None) -> np.ndarray:
    """n draws from mu by inverse CDF of counter-based uniforms."""
    from .rng import STREAM_INIT, sample_uniform
    u = sample_uniform(seed, n, STREAM_INIT, workers)
    return np.asarray(mu.quantile(u), dtype=float)
