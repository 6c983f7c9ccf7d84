"""Legacy ASCII VTK, CSV and JSON writers.

Every file starts with a header naming the tool version and the hash of the
run configuration.  Floats are written with 17 significant digits so the
same numbers always produce the same bytes.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .mesh import MARKER_NAMES, Mesh2D

_FMT = "{:.17g}"


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return _FMT.format(x)


def header_lines(config_hash: str | None) -> list[str]:
    return [f"topograd {__version__}", f"config_hash {config_hash or 'none'}"]


def write_vtk(path, mesh: Mesh2D, point_data: dict | None = None, cell_data: dict | None = None,
              config_hash: str | None = None) -> Path:
    """Unstructured grid of triangles with optional POINT_DATA / CELL_DATA scalars."""
    path = Path(path)
    hdr = " ".join(header_lines(config_hash))
    lines = ["# vtk DataFile Version 3.0", hdr, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines += [f"{_num(x)} {_num(y)} 0" for x, y in mesh.vertices]
    m = mesh.n_triangles
    lines.append(f"CELLS {m} {4 * m}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {m}")
    lines += ["5"] * m
    cells = {"region": mesh.region}
    cells.update(cell_data or {})
    lines.append(f"CELL_DATA {m}")
    for name, vals in cells.items():
        lines += _scalars(name, vals)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, vals in point_data.items():
            lines += _scalars(name, vals)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_vtk_points(path, points, point_data: dict, config_hash: str | None = None) -> Path:
    """Scattered evaluation points as POLYDATA vertices with POINT_DATA."""
    path = Path(path)
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    lines = ["# vtk DataFile Version 3.0", " ".join(header_lines(config_hash)), "ASCII",
             "DATASET POLYDATA", f"POINTS {n} double"]
    lines += [f"{_num(x)} {_num(y)} 0" for x, y in pts]
    lines.append(f"VERTICES {n} {2 * n}")
    lines += [f"1 {i}" for i in range(n)]
    lines.append(f"POINT_DATA {n}")
    for name, vals in point_data.items():
        lines += _scalars(name, vals)
    path.write_text("\n".join(lines) + "\n")
    return path


def _scalars(name, vals):
    vals = np.asarray(vals)
    kind = "int" if np.issubdtype(vals.dtype, np.integer) else "double"
    out = [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
    if kind == "int":
        out += [str(int(v)) for v in vals]
    else:
        out += [_num(v) for v in vals]
    return out


def write_csv(path, rows: list[dict], config_hash: str | None = None, columns=None) -> Path:
    """Rows of dicts; a '#'-prefixed header block precedes the column names."""
    path = Path(path)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        for line in header_lines(config_hash):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
    return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _num(v)
    return str(v)


def read_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def field_rows(mesh: Mesh2D, values) -> list[dict]:
    return [{"vertex": i, "x": x, "y": y, "value": v}
            for i, ((x, y), v) in enumerate(zip(mesh.vertices, np.asarray(values, dtype=float)))]


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        x = float(o)
        return x if math.isfinite(x) else None
    return o


def write_json(path, payload: dict, config_hash: str | None = None) -> Path:
    path = Path(path)
    doc = {"tool": f"topograd {__version__}", "config_hash": config_hash or "none"}
    doc.update(_jsonable(payload))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def boundary_marker_names(markers) -> list[str]:
    return [MARKER_NAMES[int(m)] for m in markers]
