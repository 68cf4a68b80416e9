"""Export of fields, densities and records.

Binary blocks are flat little-endian float64, row-major, with a one-line
text header "n_steps n_points x_min x_max t T" in a sibling .hdr file.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

FORMATS = ("csv", "binary", "both")


def header_line(mesh, grid) -> str:
    return (f"{mesh.n_steps} {grid.n_points} {grid.x_min!r} {grid.x_max!r} "
            f"{mesh.t!r} {mesh.T!r}")


def write_block(base: Path, values: np.ndarray, mesh, grid, fmt: str = "csv"):
    """Write an (n_t+1, N) block as CSV (s, x, value rows) and/or binary."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    base = Path(base)
    vals = np.asarray(values, dtype=float)
    written = []
    if fmt in ("binary", "both"):
        vals.astype("<f8").tofile(base.with_suffix(".bin"))
        base.with_suffix(".hdr").write_text(header_line(mesh, grid) + "\n")
        written += [base.with_suffix(".bin"), base.with_suffix(".hdr")]
    if fmt in ("csv", "both"):
        x = grid.nodes
        with open(base.with_suffix(".csv"), "w", newline="") as fh:
            fh.write("# " + header_line(mesh, grid) + "\n")
            w = csv.writer(fh)
            w.writerow(["s", "x", "value"])
            for s, row in zip(mesh.nodes, vals):
                for xi, v in zip(x, row):
                    w.writerow([repr(float(s)), repr(float(xi)), repr(float(v))])
        written.append(base.with_suffix(".csv"))
    return written


def read_block(base: Path) -> tuple:
    """Inverse of the binary branch of write_block: (values, header fields)."""
    base = Path(base)
    parts = base.with_suffix(".hdr").read_text().split()
    n_steps, n_points = int(parts[0]), int(parts[1])
    x_min, x_max, t, T = map(float, parts[2:])
    vals = np.fromfile(base.with_suffix(".bin"), dtype="<f8").reshape(n_steps + 1, n_points)
    return vals, dict(n_steps=n_steps, n_points=n_points, x_min=x_min, x_max=x_max, t=t, T=T)


def write_density_slice(path: Path, grid, values: np.ndarray):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "density"])
        for xi, v in zip(grid.nodes, values):
            w.writerow([repr(float(xi)), repr(float(v))])


def write_table(path: Path, columns: Iterable[str], rows: Iterable[Iterable]):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(columns))
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_default)


def write_json(path: Path, obj):
    Path(path).write_text(dumps(obj) + "\n")
