"""Measure flows driven by a frozen gradient field.

Three independent routes: the forward Fokker-Planck grid scheme, Euler
particles for the controlled SDE, and Girsanov reweighting of uncontrolled
base paths.  The dual (backward test-function) evaluation lives here too.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import MeshMismatch, WeightDegenerate
from .fields import VectorField, interp_linear
from .measure import (GridDensity, MeasureFlow, ParticleEnsemble, TimeMesh, integrate_against,
                      sample_measure)
from .pde import BC_QUADRATIC, backward_sweep, solve_forward_fp
from .rng import STREAM_PATH, block_generator, map_blocks

ESS_FLOOR = 0.01


class FlowMethod(str, Enum):
    FP_GRID = "FP_GRID"
    PARTICLE_SDE = "PARTICLE_SDE"
    GIRSANOV_REWEIGHT = "GIRSANOV_REWEIGHT"


@dataclass(frozen=True)
class MCParams:
    n_particles: int = 100_000
    seed: int = 0
    substeps: int = 1
    record_every: int = 10
    workers: Optional[int] = None

    def __post_init__(self):
        if self.n_particles < 2 or self.substeps < 1 or self.record_every < 1:
            raise ValueError("n_particles >= 2, substeps >= 1 and record_every >= 1 required")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True, eq=False)
class GirsanovBatch:
    mesh: TimeMesh              # recording mesh
    positions: np.ndarray       # base paths, (n_rec, N)
    log_weights: np.ndarray     # log M, (n_rec, N)

    @property
    def ess(self) -> np.ndarray:
        lw = self.log_weights - self.log_weights.max(axis=1, keepdims=True)
        w = np.exp(lw)
        w /= w.sum(axis=1, keepdims=True)
        return 1.0 / np.sum(w * w, axis=1)

    def ensemble(self, n: int) -> ParticleEnsemble:
        return ParticleEnsemble.from_log_weights(self.positions[n], self.log_weights[n])


def drift_values(model, DV: VectorField) -> np.ndarray:
    """D_pH(s, x, DV(s, x)) on the mesh x grid."""
    s = DV.mesh.nodes[:, None]
    x = DV.grid.nodes[None, :]
    return np.broadcast_to(model.hamiltonian_dp(s, x, DV.values), DV.values.shape).copy()


def _initial_positions(m0, n, seed, workers):
    return sample_measure(m0, n, seed, workers)


def _record_mesh(mesh: TimeMesh, every: int) -> TimeMesh:
    if mesh.n_steps % every:
        raise MeshMismatch(f"record_every={every} does not divide n_steps={mesh.n_steps}")
    return mesh.coarsen(every)


def _particle_run(model, DV: VectorField, x0, mc: MCParams, girsanov: bool):
    """Block-parallel Euler stepping; returns recorded positions (and log M)."""
    mesh, grid = DV.mesh, DV.grid
    sig = model.sigma_scalar
    n_sub = mc.substeps
    h = mesh.dt / n_sub
    sq = np.sqrt(h)
    times = mesh.nodes
    every = mc.record_every
    n_rec = mesh.n_steps // every + 1
    DVv = DV.values

    def run(b, sl):
        rng = block_generator(mc.seed, b, STREAM_PATH)
        X = x0[sl].copy()
        pos = np.empty((n_rec, X.size))
        pos[0] = X
        logm = np.zeros((n_rec, X.size)) if girsanov else None
        lm = np.zeros(X.size)
        for k in range(mesh.n_steps):
            for j in range(n_sub):
                s = times[k] + j * h
                p = interp_linear(grid, DVv[k], X)
                g = model.hamiltonian_dp(s, X, p)
                dw = sq * rng.standard_normal(X.size)
                if girsanov:
                    th = g / sig
                    lm += th * dw - 0.5 * th * th * h
                    X = X + sig * dw
                else:
                    X = X + g * h + sig * dw
            if (k + 1) % every == 0:
                r = (k + 1) // every
                pos[r] = X
                if girsanov:
                    logm[r] = lm
        return pos, logm
    parts = map_blocks(run, x0.size, mc.workers)
    pos = np.concatenate([p for p, _ in parts], axis=1)
    logm = np.concatenate([l for _, l in parts], axis=1) if girsanov else None
    return pos, logm


def simulate_particles(model, DV: VectorField, m0, mc: MCParams) -> MeasureFlow:
    rec = _record_mesh(DV.mesh, mc.record_every)
    x0 = _initial_positions(m0, mc.n_particles, mc.seed, mc.workers)
    pos, _ = _particle_run(model, DV, x0, mc, False)
    slices = [ParticleEnsemble.uniform(p, mc.seed) for p in pos]
    return MeasureFlow(rec, slices, "particles")


def simulate_girsanov(model, DV: VectorField, m0, mc: MCParams) -> GirsanovBatch:
    """Base paths x + sigma (w_s - w_t) with log M accumulated left-point."""
    rec = _record_mesh(DV.mesh, mc.record_every)
    x0 = _initial_positions(m0, mc.n_particles, mc.seed, mc.workers)
    pos, logm = _particle_run(model, DV, x0, mc, True)
    return GirsanovBatch(rec, pos, logm)


def flow_from_gradient(model, DV: VectorField, m0, method=FlowMethod.FP_GRID,
                       mc: Optional[MCParams] = None, bc=BC_QUADRATIC) -> MeasureFlow:
    method = FlowMethod(method)
    if method == FlowMethod.FP_GRID:
        if not isinstance(m0, GridDensity):
            raise TypeError("FP_GRID needs a grid density")
        if m0.grid != DV.grid:
            raise MeshMismatch("initial density lives on another grid")
        b = drift_values(model, DV)
        return solve_forward_fp(b, model.sigma, DV.mesh, DV.grid, m0)
    mc = MCParams() if mc is None else mc
    if method == FlowMethod.PARTICLE_SDE:
        return simulate_particles(model, DV, m0, mc)
    batch = simulate_girsanov(model, DV, m0, mc)
    ess = batch.ess
    n_bad = np.flatnonzero(ess < ESS_FLOOR * mc.n_particles)
    if n_bad.size:
        k = int(n_bad[0])
        raise WeightDegenerate(f"ESS {ess[k]:.1f} below {ESS_FLOOR:g} N at s={batch.mesh.nodes[k]:.4g}")
    slices = [batch.ensemble(n) for n in range(batch.mesh.n_steps + 1)]
    return MeasureFlow(batch.mesh, slices, "particles")


def girsanov_diagnostics(batch: GirsanovBatch) -> dict:
    """Per-node mean of M with standard error, and mean of M |X|^2."""
    M = np.exp(batch.log_weights)
    n = M.shape[1]
    mean = M.mean(axis=1)
    se = M.std(axis=1, ddof=1) / np.sqrt(n)
    MX2 = M * batch.positions ** 2
    mx2 = MX2.mean(axis=1)
    mx2_se = MX2.std(axis=1, ddof=1) / np.sqrt(n)
    flags = np.abs(mean - 1.0) > 3 * se + 1e-15
    return {"s": batch.mesh.nodes.tolist(), "mean_M": mean.tolist(), "se_M": se.tolist(),
            "mean_MX2": mx2.tolist(), "se_MX2": mx2_se.tolist(), "ess": batch.ess.tolist(),
            "flagged_nodes": np.flatnonzero(flags).tolist(),
            "martingale_ok": bool(not flags.any()),
            "MX2_finite": bool(np.all(np.isfinite(mx2)))}


def dual_expectation(model, DV: VectorField, phi: Callable, m0, s_index: int,
                     bc=BC_QUADRATIC) -> float:
    """int Psi(t, z) dm0 with Psi solving the backward test-function equation.

    -dPsi/dtau - a/2 Psi'' - D_pH(tau, z, DV) Psi' = 0 on [t, s], Psi(s) = phi.
    """
    mesh, grid = DV.mesh, DV.grid
    if not 0 <= s_index <= mesh.n_steps:
        raise MeshMismatch("s_index outside mesh")
    term = np.asarray(phi(grid.nodes), dtype=float)
    if s_index == 0:
        psi0 = term
    else:
        b = drift_values(model, DV)[:s_index + 1]
        psi = backward_sweep(model.a_scalar, grid, mesh.head(s_index), term, b, None, bc)
        psi0 = psi[0]
    if isinstance(m0, GridDensity) and m0.grid == grid:
        return float(grid.integrate(m0.values * psi0))
    return integrate_against(m0, lambda z: interp_linear(grid, psi0, z))
