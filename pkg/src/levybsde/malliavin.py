"""Malliavin derivatives in jump directions as path-shift differences, the derivative
BSDE along a fixed base solution, and the diagonal identification of Z and U."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .generator import GeneratorSpec, TerminalSpec
from .levy import PathBundle, TimeGrid, shift_bundle, shift_values
from .solver.picard import PolynomialBasis, _Projector, picard_core, solve_picard_regression
from .solver.types import DiscreteSolution

logger = logging.getLogger(__name__)


def _xi_call(xi, values):
    if isinstance(xi, TerminalSpec):
        return xi.evaluate(values)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return float(np.asarray(xi(values[None, :])).reshape(-1)[0])
    return np.asarray(xi(values), dtype=float)


def difference_derivative(xi, path, grid: TimeGrid, r: float, v: float):
    """``xi(X + v 1[r,T]) - xi(X)`` for one path (1-D) or a stack of paths (2-D)."""
    if v == 0:
        raise DomainError("v = 0 is the Brownian direction, not a path shift")
    path = np.asarray(path, dtype=float)
    return _xi_call(xi, shift_values(path, grid, r, v)) - _xi_call(xi, path)


def _require_paths(sol):
    if sol.kind != "paths" or sol.bundle is None:
        raise ConfigurationError("derivative BSDEs are solved on path bundles only; "
                                 "re-solve the base problem with solve_picard_regression")


def solve_derivative_bsde(
    spec: GeneratorSpec,
    base_sol: DiscreteSolution,
    terminal: TerminalSpec,
    direction,
    randomness: PathBundle | None = None,
    *,
    basis=None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> DiscreteSolution:
    """Solve for ``(D_{r,v}Y, D_{r,v}Z, D_{r,v}U)``; zero before the first node ``>= r``.

    For ``v != 0`` the terminal value is the path-shift difference of ``xi``
    and the driver is ``Df + f(X^v, Theta + (y, z, U + u)) - f(X^v, Theta)``
    with ``X^v`` the shifted path. Without ``d_malliavin_f``, ``Df`` is the
    shift difference ``f(X^v, Theta) - f(X, Theta)``.

    For ``v == 0`` the terminal value is ``terminal.d0_xi`` and the driver is
    the linearization of ``f`` at ``Theta`` (clamp chain rule included).
    """
    _require_paths(base_sol)
    bundle = base_sol.bundle if randomness is None else randomness
    if randomness is not None and not np.array_equal(randomness.values, base_sol.bundle.values):
        raise ConfigurationError("randomness must be the bundle of the base solution")
    if not base_sol.converged:
        logger.warning("base solution is flagged non-converged")
    r, v = float(direction[0]), float(direction[1])
    grid = bundle.grid
    model = bundle.model
    marks, lam = model.marks, model.intensities
    k = grid.first_index_at_or_after(r)
    N = grid.n_steps
    X = bundle.values
    nodes = grid.nodes
    Yb, Zb, Ub = base_sol.Y, base_sol.Z, base_sol.U

    if v != 0:
        Xs = shift_values(X, grid, r, v)
        xi_d = terminal.evaluate(Xs) - terminal.evaluate(X)
        base_f = {}
        shift_base_f = {}
        df = {}
        for i in range(k, N):
            t = float(nodes[i])
            shift_base_f[i] = spec.evaluate(Xs[:, : i + 1], t, Yb[i], Zb[i], Ub[i], marks, lam)
            if spec.d_malliavin_f is not None:
                w = spec.aggregate(t, Ub[i], marks, lam)
                df[i] = np.asarray(spec.d_malliavin_f(r, v, t, Yb[i], Zb[i], w, X[:, : i + 1]), dtype=float)
            else:
                base_f[i] = spec.evaluate(X[:, : i + 1], t, Yb[i], Zb[i], Ub[i], marks, lam)
                df[i] = shift_base_f[i] - base_f[i]

        def driver(i, y, z, u):
            t = float(nodes[i])
            moved = spec.evaluate(Xs[:, : i + 1], t, Yb[i] + y, Zb[i] + z, Ub[i] + u, marks, lam)
            return df[i] + moved - shift_base_f[i]
    else:
        if terminal.d0_xi is None:
            raise ConfigurationError("direction v=0 needs terminal.d0_xi (the Brownian derivative of xi)")
        xi_d = np.asarray(terminal.d0_xi(X, grid, r, model), dtype=float) * np.ones(bundle.n_paths)
        lin = {}
        for i in range(k, N):
            t = float(nodes[i])
            fy, fz, fU = spec.linearize(X[:, : i + 1], t, Yb[i], Zb[i], Ub[i], marks, lam)
            if spec.d_malliavin_f is not None:
                w = spec.aggregate(t, Ub[i], marks, lam)
                d0 = np.asarray(spec.d_malliavin_f(r, 0.0, t, Yb[i], Zb[i], w, X[:, : i + 1]), dtype=float)
            else:
                d0 = 0.0
            lin[i] = (fy, fz, fU, d0)

        def driver(i, y, z, u):
            fy, fz, fU, d0 = lin[i]
            out = d0 + fy * y + fz * z
            if fU.shape[-1]:
                out = out + np.einsum("pj,pj->p", fU, u)
            return out

    DY, DZ, DU, info = picard_core(bundle, driver, xi_d, start=k, basis=basis, tol=tol, max_iter=max_iter)
    info.update({"direction": (r, v), "start_index": k})
    return DiscreteSolution(grid, DY, DZ, DU, marks, "paths", bundle=bundle, diagnostics=info,
                            converged=info["converged"])


def shifted_solution_difference(model, spec, terminal, base_sol: DiscreteSolution, r, v, *,
                                basis=None, tol=1e-8, max_iter=50):
    """Independent route for ``v != 0``: re-solve on the shifted bundle and subtract the base.

    Entries before the first node ``>= r`` are set to zero, matching the
    derivative's support.
    """
    _require_paths(base_sol)
    shifted = shift_bundle(base_sol.bundle, r, v)
    sol_s = solve_picard_regression(model, spec, terminal, shifted, basis=basis, tol=tol, max_iter=max_iter)
    k = base_sol.grid.first_index_at_or_after(r)
    out = sol_s.Y - base_sol.Y
    out[:k] = 0.0
    return out, sol_s


def diagonal_directions(base_sol: DiscreteSolution, n_nodes: int = 10, include_brownian: bool = True):
    """Directions ``(t_k, v)`` on evenly spaced nodes ``k >= 1`` for every atom (and ``v = 0``)."""
    N = base_sol.grid.n_steps
    ks = np.unique(np.linspace(1, N - 1, min(n_nodes, max(N - 1, 1))).round().astype(int))
    vs = ([0.0] if include_brownian else []) + [float(m) for m in base_sol.marks]
    return [(float(base_sol.grid.nodes[k]), v) for k in ks for v in vs]


@dataclass
class IdentificationReport:
    z_error: float
    u_errors: dict
    per_direction: list = field(default_factory=list)

    @property
    def max_u_error(self) -> float:
        return max(self.u_errors.values(), default=0.0)

    def as_dict(self):
        return {"check": "identify_ZU", "ok": True, "worst": max(self.z_error if math.isfinite(self.z_error) else 0.0,
                                                                 self.max_u_error),
                "location": self.per_direction, "z_error": self.z_error,
                "u_errors": {str(k): v for k, v in self.u_errors.items()}}


def identify_ZU(base_sol: DiscreteSolution, derivs, basis=None) -> IdentificationReport:
    """Compare ``E[D_{r,v}Y_r | X_{k-1}]`` with ``Z`` (v = 0) or ``U(., v)`` on the interval ending at ``r = t_k``.

    ``derivs`` maps ``(r, v)`` to derivative solutions (or is a list of them).
    Errors are empirical L2 norms over paths, pooled over the directions.
    """
    _require_paths(base_sol)
    if isinstance(derivs, dict):
        items = list(derivs.items())
    else:
        items = [(d.diagnostics["direction"], d) for d in derivs]
    basis = PolynomialBasis.from_descriptor(basis)
    X = base_sol.bundle.values
    grid = base_sol.grid
    z_sq, u_sq = [], {float(m): [] for m in base_sol.marks}
    per = []
    for (r, v), d in items:
        k = grid.first_index_at_or_after(r)
        if k == 0:
            raise DomainError("identification needs r > 0 (a previous node to condition on)")
        diag_vals = d.Y[k]
        B = basis.design(X[:, :k], grid.nodes[k - 1])
        proj = _Projector(B).fit(diag_vals)
        if v == 0:
            target = base_sol.Z[k - 1]
        else:
            j = int(np.argmin(np.abs(base_sol.marks - v)))
            if abs(base_sol.marks[j] - v) > 1e-12:
                raise DomainError(f"direction v={v} is not an atom of the model")
            target = base_sol.U[k - 1, :, j]
        err2 = float(np.mean((proj - target) ** 2))
        per.append({"r": float(r), "v": float(v), "node": int(k), "l2_error": math.sqrt(err2)})
        if v == 0:
            z_sq.append(err2)
        else:
            u_sq[float(base_sol.marks[j])].append(err2)
    z_error = math.sqrt(np.mean(z_sq)) if z_sq else math.nan
    u_errors = {m: math.sqrt(np.mean(e)) for m, e in u_sq.items() if e}
    return IdentificationReport(z_error, u_errors, per)


def solve_diagonal(spec, base_sol, terminal, directions=None, **kwargs):
    """Derivative solutions for each direction, keyed by ``(r, v)``."""
    directions = diagonal_directions(base_sol) if directions is None else directions
    return {(float(r), float(v)): solve_derivative_bsde(spec, base_sol, terminal, (r, v), **kwargs)
            for r, v in directions}
