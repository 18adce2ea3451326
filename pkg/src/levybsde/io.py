"""CSV serialization of solutions and path bundles (long format, 17 significant digits)."""

from __future__ import annotations

import csv
import io
from collections import defaultdict

import numpy as np

from .errors import ConfigurationError
from .levy import TimeGrid
from .solver.types import DiscreteSolution

HEADER = ["t", "point", "quantity", "value"]


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _points(sol: DiscreteSolution):
    if sol.kind == "lattice":
        return [_fmt(s) for s in sol.states]
    return [str(p) for p in range(sol.n_points)]


def solution_to_csv(sol: DiscreteSolution) -> str:
    """One row per (t, point, quantity); points are lattice states or path indices."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    pts = _points(sol)
    nodes = sol.grid.nodes
    labels = [f"U@{_fmt(m)}" for m in sol.marks]
    for i, t in enumerate(nodes):
        ts = _fmt(t)
        for p, ps in enumerate(pts):
            w.writerow([ts, ps, "Y", _fmt(sol.Y[i, p])])
            if i < sol.Z.shape[0]:
                w.writerow([ts, ps, "Z", _fmt(sol.Z[i, p])])
                for j, lab in enumerate(labels):
                    w.writerow([ts, ps, lab, _fmt(sol.U[i, p, j])])
    return buf.getvalue()


def solution_from_csv(text: str) -> DiscreteSolution:
    """Inverse of ``solution_to_csv``; lattice vs path kind is inferred from the Z rows."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ConfigurationError("solution file is empty") from None
    if header != HEADER:
        raise ConfigurationError(f"solution file header must be {HEADER}, got {header}")
    data = defaultdict(dict)
    times, points, marks = {}, {}, {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise ConfigurationError(f"solution file line {lineno}: expected 4 fields")
        t, p, q, val = row
        try:
            tv, x = float(t), float(val)
        except ValueError:
            raise ConfigurationError(f"solution file line {lineno}: non-numeric value") from None
        times.setdefault(t, tv)
        points.setdefault(p, len(points))
        if q.startswith("U@"):
            marks.setdefault(q, float(q[2:]))
        elif q not in ("Y", "Z"):
            raise ConfigurationError(f"solution file line {lineno}: unknown quantity {q!r}")
        data[q][(t, p)] = x
    tkeys = sorted(times, key=times.get)
    pkeys = sorted(points, key=points.get)
    grid = TimeGrid(np.array([times[k] for k in tkeys]))

    def block(q, rows):
        arr = np.empty((len(rows), len(pkeys)))
        for i, t in enumerate(rows):
            for k, p in enumerate(pkeys):
                try:
                    arr[i, k] = data[q][(t, p)]
                except KeyError:
                    raise ConfigurationError(f"solution file misses {q} at t={t}, point={p}") from None
        return arr

    Y = block("Y", tkeys)
    z_rows = [t for t in tkeys if (t, pkeys[0]) in data["Z"]]
    Z = block("Z", z_rows)
    mkeys = sorted(marks, key=marks.get)
    U = np.stack([block(q, z_rows) for q in mkeys], axis=-1) if mkeys else np.zeros(Z.shape + (0,))
    kind = "lattice" if len(z_rows) == len(tkeys) else "paths"
    states = np.array([float(p) for p in pkeys]) if kind == "lattice" else None
    return DiscreteSolution(grid, Y, Z, U, np.array([marks[q] for q in mkeys]), kind, states=states)


def bundle_to_csv(bundle) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for i, t in enumerate(bundle.grid.nodes):
        ts = _fmt(t)
        for p in range(bundle.n_paths):
            w.writerow([ts, str(p), "X", _fmt(bundle.values[p, i])])
    return buf.getvalue()
