"""CSV and plain-text serialization of grids, vectors, results and measures.

All tables are RFC-4180 CSV with a header row and CRLF line ends.  Floats are
written with ``repr`` so that values round-trip exactly and identical inputs
give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .mesh import Grid


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def parse_value(text: str):
    """Inverse of :func:`fmt` for numeric cells; other text is returned unchanged."""
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.write_bytes(csv_text(header, rows).encode("utf-8"))
    return path


def read_csv(path):
    """``(header, rows)`` with numeric cells converted back."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[parse_value(c) for c in row] for row in reader]
    return header, rows


# --- domain objects ---

def _coordinate_columns(grid: Grid, numbered=False):
    if numbered:
        return ["x1"] if grid.dim == 1 else ["x1", "x2"]
    return ["x"] if grid.dim == 1 else ["x", "y"]


def grid_function_table(grid: Grid, values, name="value"):
    """Rows ``(index, x[, y], value)`` for a nodal or load vector."""
    values = np.asarray(values, dtype=float)
    header = ["index", *_coordinate_columns(grid), name]
    rows = [[i, *grid.coordinates[i], values[i]] for i in range(grid.size)]
    return header, rows


def obstacle_result_table(result):
    grid = result.grid
    # Coordinates are x1, x2 here since y names the state.
    header = ["index", *_coordinate_columns(grid, True), "psi", "y", "xi", "class"]
    labels = result.classes()
    psi = result.problem.psi
    rows = [[i, *grid.coordinates[i], psi[i], result.y[i], result.xi[i], labels[i]]
            for i in range(grid.size)]
    return header, rows


def measure_table(mu):
    """Rows ``(index, mass)`` with ``inf`` for eliminated nodes."""
    return ["index", "mass"], [[i, m] for i, m in enumerate(mu.mass)]


def read_measure(path, grid: Grid):
    from .measures import DiscreteMeasure

    header, rows = read_csv(path)
    if header != ["index", "mass"]:
        raise ValueError(f"not a measure table: {header}")
    mass = np.zeros(grid.size)
    for i, m in rows:
        mass[int(i)] = float(m)
    return DiscreteMeasure(grid, mass)


def element_table(element, grid: Grid):
    """Rows ``(kind, index, member | mass, anchor)``."""
    header = ["kind", "index", "member" if element.kind == "node-set" else "mass", "anchor"]
    if element.kind == "node-set":
        col = element.omega_hat.astype(int)
    else:
        col = element.mu.mass
    return header, [[element.kind, i, col[i], element.anchor] for i in range(grid.size)]


def stationarity_table(point, grid: Grid):
    header = ["index", *_coordinate_columns(grid, True), "y", "u", "p", "nu", "lambda", "mu"]
    mu = point.mu.mass if point.mu is not None else np.full(grid.size, np.nan)
    rows = [[i, *grid.coordinates[i], point.y[i], point.u[i], point.p[i], point.nu[i],
             point.lam[i], mu[i]] for i in range(grid.size)]
    return header, rows
