"""Time-indexed grid functions and the finite-difference operators on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .errors import MeshMismatch
from .measure import Grid1D, TimeMesh


@dataclass(frozen=True, eq=False)
class ScalarField:
    mesh: TimeMesh
    grid: Grid1D
    values: np.ndarray  # (n_steps+1, n_points)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[:2] != (self.mesh.n_steps + 1, self.grid.n_points):
            raise MeshMismatch(f"field shape {v.shape} does not match mesh x grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite values")
        object.__setattr__(self, "values", v)

    def at(self, n: int) -> np.ndarray:
        return self.values[n]

    def tail(self, start: int):
        return type(self)(self.mesh.tail(start), self.grid, self.values[start:])

    def head(self, stop: int):
        return type(self)(self.mesh.head(stop), self.grid, self.values[:stop + 1])

    def interp(self, n: int, x) -> np.ndarray:
        return interp_linear(self.grid, self.values[n], x)


class VectorField(ScalarField):
    """Gradient-type field; in one dimension it stores one component."""


def grad_nodes(v: np.ndarray, dx: float) -> np.ndarray:
    """Centered differences inside, second-order one-sided at the ends.

    Works along the last axis, so whole time stacks can be differentiated.
    """
    v = np.asarray(v, dtype=float)
    g = np.empty_like(v)
    g[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * dx)
    g[..., 0] = (-3 * v[..., 0] + 4 * v[..., 1] - v[..., 2]) / (2 * dx)
    g[..., -1] = (3 * v[..., -1] - 4 * v[..., -2] + v[..., -3]) / (2 * dx)
    return g


def grad_nodes_T(w: np.ndarray, dx: float) -> np.ndarray:
    """Transpose of grad_nodes along axis 0: returns D^T w."""
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    c = 1.0 / (2 * dx)
    # interior rows i: -c at i-1, +c at i+1
    out[:-2] -= c * w[1:-1]
    out[2:] += c * w[1:-1]
    # first row: (-3, 4, -1) c
    out[0] += -3 * c * w[0]
    out[1] += 4 * c * w[0]
    out[2] += -c * w[0]
    # last row: (1, -4, 3) c on (N-3, N-2, N-1)
    out[-1] += 3 * c * w[-1]
    out[-2] += -4 * c * w[-1]
    out[-3] += c * w[-1]
    return out


def second_diff(v: np.ndarray, dx: float) -> np.ndarray:
    """Three-point second difference; boundary rows copy their neighbours."""
    v = np.asarray(v, dtype=float)
    d = np.empty_like(v)
    d[..., 1:-1] = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / dx ** 2
    d[..., 0] = d[..., 1]
    d[..., -1] = d[..., -2]
    return d


def interp_linear(grid: Grid1D, v: np.ndarray, x) -> np.ndarray:
    """Piecewise-linear interpolation with linear extrapolation off the grid."""
    x = np.asarray(x, dtype=float)
    dx = grid.dx
    s = (x - grid.x_min) / dx
    i = np.clip(np.floor(s).astype(np.int64), 0, grid.n_points - 2)
    f = s - i
    return v[i] * (1.0 - f) + v[i + 1] * f


def weighted_l2(field: np.ndarray, grid: Grid1D, dt: float, gamma: float) -> float:
    """Trapezoid space-time integral of |field|^2 (1+x^2)^-gamma."""
    pi = (1.0 + grid.nodes ** 2) ** (-gamma)
    f = np.asarray(field, dtype=float)
    per_t = grid.integrate(f ** 2 * pi)
    if per_t.ndim == 0:
        return float(per_t)
    if per_t.size == 1:
        return float(per_t[0])
    return float(trapezoid(per_t, dx=dt))
