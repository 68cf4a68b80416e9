"""Run configuration: TOML parsing, dot-path overrides, validation and the
builders that turn a config into model, grids and solver settings."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import tomli

from .errors import ConfigError

# schema: section -> key -> default (None = required); nested dicts are subsections
SCHEMA: Dict[str, Any] = {
    "seed": 0,
    "model": {
        "dim": 1,
        "horizon": None,
        "sigma": 1.0,
        "family": {"tag": None, "params": {}},
    },
    "constants": {"c": 1.0, "c_T": 1.0, "delta": 1.0, "lam": 0.5, "gamma": 4.0, "C_global": None},
    "initial": {"kind": "gaussian", "mean": 1.0, "std": 0.5},
    "numerics": {
        "bc": "quadratic",
        "hamiltonian": "centered",
        "grid": {"x_min": -8.0, "x_max": 8.0, "n_points": 401},
        "mesh": {"dt": 1e-3},
        "fixedpoint": {"max_iters": 60, "tol_V": 1e-7, "tol_W2": 1e-6, "damping": 1.0,
                       "flow_method": "FP_GRID"},
        "mc": {"n_particles": 100000, "substeps": 1, "record_every": 10},
    },
    "output": {"dir": "out", "format": "csv"},
}
OPTIONAL_NONE = {("constants", "C_global")}
FREE_FORM = {("model", "family", "params")}


def _required(schema, path) -> bool:
    for key, default in schema.items():
        p = path + (key,)
        if isinstance(default, dict) and p not in FREE_FORM:
            if _required(default, p):
                return True
        elif default is None and p not in OPTIONAL_NONE:
            return True
    return False


def _merge(schema, data, path, out):
    if not isinstance(data, dict):
        raise ConfigError("expected a section", ".".join(path) or "root")
    for key in data:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", ".".join(path + (key,)) if path else key)
    for key, default in schema.items():
        p = path + (key,)
        name = ".".join(p)
        if isinstance(default, dict) and p not in FREE_FORM:
            if key not in data and _required(default, p):
                raise ConfigError("missing section", name)
            out[key] = {}
            _merge(default, data.get(key, {}), p, out[key])
        elif key in data:
            out[key] = data[key]
        elif default is None and p not in OPTIONAL_NONE:
            raise ConfigError("missing required key", name)
        else:
            out[key] = copy.deepcopy(default)
    return out


def parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides: List[str]) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE", "overrides")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("override descends into a value", key)
        node[parts[-1]] = parse_value(val.strip())
    return data


@dataclass
class RunConfig:
    data: dict
    source_text: str = ""

    def __getitem__(self, k):
        return self.data[k]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def digest(self) -> str:
        from .io import dumps
        return hashlib.sha256(dumps(self.data).encode()).hexdigest()


def _check(cond, msg, key):
    if not cond:
        raise ConfigError(msg, key)


def validate(data: dict) -> dict:
    m = data["model"]
    _check(m["dim"] == 1, "only dim = 1 is supported", "model.dim")
    h = m["horizon"]
    _check(isinstance(h, list) and len(h) == 2 and all(isinstance(v, (int, float)) for v in h)
           and 0 <= h[0] < h[1], "horizon must be [t, T] with 0 <= t < T", "model.horizon")
    _check(isinstance(m["sigma"], (int, float)) and m["sigma"] > 0, "sigma must be positive", "model.sigma")
    fam = m["family"]
    _check(fam["tag"] in ("LQ_MEANFIELD", "COLE_HOPF"), "tag must be LQ_MEANFIELD or COLE_HOPF",
           "model.family.tag")
    _check(isinstance(fam["params"], dict) and all(isinstance(v, (int, float)) for v in fam["params"].values()),
           "params must map names to numbers", "model.family.params")
    allowed = {"LQ_MEANFIELD": {"q_bar", "h_T", "q_bar_T"}, "COLE_HOPF": {"curvature"}}[fam["tag"]]
    bad = set(fam["params"]) - allowed
    _check(not bad, f"unknown family parameters {sorted(bad)}", "model.family.params")
    k = data["constants"]
    for key in ("c", "delta", "gamma"):
        _check(isinstance(k[key], (int, float)) and k[key] > 0, f"{key} must be positive", f"constants.{key}")
    for key in ("c_T", "lam"):
        _check(isinstance(k[key], (int, float)) and k[key] >= 0, f"{key} must be >= 0", f"constants.{key}")
    _check(k["gamma"] > 3.5, "gamma must exceed dim/2 + 3", "constants.gamma")
    _check(k["C_global"] is None or (isinstance(k["C_global"], (int, float)) and k["C_global"] > 0),
           "C_global must be positive", "constants.C_global")
    ini = data["initial"]
    _check(ini["kind"] == "gaussian", "only gaussian initial measures are supported", "initial.kind")
    _check(isinstance(ini["std"], (int, float)) and ini["std"] > 0, "std must be positive", "initial.std")
    n = data["numerics"]
    _check(n["bc"] in ("quadratic", "neumann"), "bc must be quadratic or neumann", "numerics.bc")
    _check(n["hamiltonian"] in ("centered", "lax_friedrichs"), "unknown Hamiltonian scheme",
           "numerics.hamiltonian")
    g = n["grid"]
    _check(isinstance(g["n_points"], int) and g["n_points"] >= 11, "n_points must be an integer >= 11",
           "numerics.grid.n_points")
    _check(g["x_max"] > g["x_min"], "x_max must exceed x_min", "numerics.grid")
    dt = n["mesh"]["dt"]
    _check(isinstance(dt, (int, float)) and dt > 0, "dt must be positive", "numerics.mesh.dt")
    steps = (h[1] - h[0]) / dt
    _check(abs(steps - round(steps)) < 1e-8 * max(1.0, steps), "dt must divide the horizon",
           "numerics.mesh.dt")
    fp = n["fixedpoint"]
    _check(isinstance(fp["max_iters"], int) and fp["max_iters"] >= 1, "max_iters must be >= 1",
           "numerics.fixedpoint.max_iters")
    _check(fp["tol_V"] > 0 and fp["tol_W2"] > 0, "tolerances must be positive", "numerics.fixedpoint")
    _check(0 < fp["damping"] <= 1, "damping must lie in (0, 1]", "numerics.fixedpoint.damping")
    _check(fp["flow_method"] in ("FP_GRID", "PARTICLE_SDE", "GIRSANOV_REWEIGHT"), "unknown flow method",
           "numerics.fixedpoint.flow_method")
    mc = n["mc"]
    for key in ("n_particles", "substeps", "record_every"):
        _check(isinstance(mc[key], int) and mc[key] >= 1, f"{key} must be a positive integer",
               f"numerics.mc.{key}")
    _check(data["output"]["format"] in ("csv", "binary", "both"), "format must be csv, binary or both",
           "output.format")
    _check(isinstance(data["seed"], int) and data["seed"] >= 0, "seed must be a non-negative integer", "seed")
    return data


def load_config(path: Optional[str], overrides: Optional[List[str]] = None) -> RunConfig:
    text = ""
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "config") from exc
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"parse error: {exc}", "config") from exc
    raw = apply_overrides(raw, overrides)
    data = _merge(SCHEMA, raw, (), {})
    return RunConfig(validate(data), text)


# ---------------------------------------------------------------- builders

def build(cfg: RunConfig):
    """(model, grid, mesh, m0, FixedPointConfig, MCParams) from a config."""
    from .fixedpoint import FixedPointConfig
    from .flow import MCParams
    from .measure import Grid1D, GridDensity, TimeMesh
    from .model import AssumptionConstants, BuiltinFamily, build_model
    d = cfg.data
    m, n = d["model"], d["numerics"]
    k = d["constants"]
    consts = AssumptionConstants(float(k["c"]), float(k["c_T"]), float(k["delta"]), float(k["lam"]),
                                 float(k["gamma"]), None if k["C_global"] is None else float(k["C_global"]))
    fam = BuiltinFamily(m["family"]["tag"], {kk: float(v) for kk, v in m["family"]["params"].items()})
    model = build_model(fam, tuple(float(v) for v in m["horizon"]), float(m["sigma"]), consts)
    g = n["grid"]
    grid = Grid1D(float(g["x_min"]), float(g["x_max"]), int(g["n_points"]))
    mesh = TimeMesh.from_dt(model.t, model.T, float(n["mesh"]["dt"]))
    ini = d["initial"]
    m0 = GridDensity.gaussian(grid, float(ini["mean"]), float(ini["std"]))
    mc = MCParams(int(n["mc"]["n_particles"]), cfg.seed, int(n["mc"]["substeps"]),
                  int(n["mc"]["record_every"]))
    fp = n["fixedpoint"]
    fpc = FixedPointConfig(int(fp["max_iters"]), float(fp["tol_V"]), float(fp["tol_W2"]),
                           float(fp["damping"]), fp["flow_method"], mc, n["bc"], n["hamiltonian"])
    return model, grid, mesh, m0, fpc, mc
