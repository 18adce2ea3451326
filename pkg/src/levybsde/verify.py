"""Oracle checks: a-priori bounds, comparison ordering and sandwich envelopes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .generator import BoundCertificate, GeneratorSpec, TerminalSpec
from .levy import TimeGrid, as_grid
from .solver.closed_form import closed_form_linear
from .solver.types import DiscreteSolution

DEFAULT_SLACK_C = 10.0


@dataclass
class BoundsReport:
    y_ok: bool
    z_ok: bool
    u_ok: bool
    y_worst: float
    z_worst: float
    u_worst: float
    y_location: tuple
    z_location: tuple
    u_location: tuple
    slack: float

    @property
    def ok(self) -> bool:
        return self.y_ok and self.z_ok and self.u_ok

    def as_dict(self):
        worst = max(self.y_worst, self.z_worst, self.u_worst)
        d = {"check": "bounds", "ok": self.ok, "worst": worst,
             "location": {"y": list(self.y_location), "z": list(self.z_location), "u": list(self.u_location)}}
        d.update({k: v for k, v in asdict(self).items() if k.endswith("_ok")})
        return d


@dataclass
class ComparisonResult:
    ok: bool
    worst: float
    location: tuple
    min_gap: float = field(default=math.nan)

    def as_dict(self):
        return {"check": "comparison", "ok": self.ok, "worst": self.worst, "location": list(self.location),
                "min_gap": self.min_gap}


def lattice_spacing(sol: DiscreteSolution) -> float:
    if sol.kind != "lattice":
        return 0.0
    return float(np.max(np.diff(sol.states)))


def default_slack(sol: DiscreteSolution, C: float = DEFAULT_SLACK_C) -> float:
    """``C * (max dt + lattice spacing)``."""
    return C * (float(np.max(sol.grid.dt)) + lattice_spacing(sol))


def _excursion(values, bound, slack):
    """Largest ``|values| - bound`` and its index; bound broadcasts over the last axes."""
    exc = np.abs(values) - bound
    k = np.unravel_index(int(np.argmax(exc)), exc.shape)
    worst = float(exc[k])
    return worst <= slack, worst, tuple(int(i) for i in k)


def check_bounds(sol: DiscreteSolution, cert: BoundCertificate, slack: float | None = None) -> BoundsReport:
    """Pointwise check of the Y, Z and U envelopes at the stored points.

    Excursions are ``|value| - envelope``; a component passes when its worst
    excursion is at most ``slack``. Locations are ``(node, point[, atom])``.
    """
    if abs(sol.grid.T - cert.T) > 1e-12 * max(1.0, cert.T):
        raise ConfigurationError(f"solution horizon {sol.grid.T} differs from certificate horizon {cert.T}")
    if slack is None:
        slack = default_slack(sol)
    if slack < 0:
        raise ConfigurationError("slack must be >= 0")
    nodes = sol.grid.nodes
    y_env = np.array([cert.y_envelope(t) for t in nodes])[:, None]
    z_env = np.array([cert.z_envelope(t) for t in sol.z_times])[:, None]
    y_ok, y_w, y_loc = _excursion(sol.Y, y_env, slack)
    z_ok, z_w, z_loc = _excursion(sol.Z, z_env, slack)
    if sol.marks.size:
        u_env = np.array([[min(cert.u_envelope(t, x), 2 * cert.R - 2) for x in sol.marks] for t in sol.z_times])
        u_ok, u_w, u_loc = _excursion(sol.U[: len(sol.z_times)], u_env[:, None, :], slack)
    else:
        u_ok, u_w, u_loc = True, -math.inf, ()
    return BoundsReport(y_ok, z_ok, u_ok, y_w, z_w, u_w, y_loc, z_loc, u_loc, float(slack))


def check_comparison(sol: DiscreteSolution, sol_prime: DiscreteSolution, tol=0.0) -> ComparisonResult:
    """``Y <= Y' + tol`` at every stored point; ``tol`` may be per node.

    ``worst`` is the largest ``Y - Y'`` (positive means a violation).
    """
    if not sol.same_discretization(sol_prime):
        raise ConfigurationError("solutions live on different grids, lattices or path bundles")
    tol = np.asarray(tol, dtype=float)
    if tol.ndim == 1:
        tol = tol[:, None]
    if np.any(tol < 0):
        raise ConfigurationError("tol must be >= 0")
    diff = sol.Y - sol_prime.Y
    k = np.unravel_index(int(np.argmax(diff - tol)), diff.shape)
    worst = float(diff[k])
    ok = bool(np.all(diff <= tol))
    return ComparisonResult(ok, worst, tuple(int(i) for i in k), float(np.min(-diff)))


def sandwich_envelopes(spec: GeneratorSpec, terminal: TerminalSpec, cert: BoundCertificate, grid) -> tuple:
    """Upper and lower envelopes ``(Ybar, -Ybar)`` from the linear comparison problem."""
    grid = as_grid(grid)
    upper = closed_form_linear(terminal.A_xi, spec.a, spec.k_f, grid)
    return upper, -upper


def report_json(report) -> str:
    return json.dumps(report.as_dict(), default=_json_default, sort_keys=True)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(type(o))
