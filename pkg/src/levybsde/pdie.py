"""Finite differences for the semilinear integro-differential equation

    -u_t - (A + K) u - f~(v, t, u, u_v, B u) = 0,   u(T, .) = g

with ``A`` the diffusion operator, ``K`` the compensated jump operator and
``B`` the kappa-weighted jump difference. Time stepping is IMEX: ``A``
implicit, everything else explicit on the later slice.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.interpolate import PchipInterpolator
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, StabilityError
from .generator import GeneratorSpec
from .levy import TimeGrid, atom_arrays, kappa
from .solver.types import DiscreteSolution, ForwardSpec

logger = logging.getLogger(__name__)


@dataclass
class PdieGrid:
    space_nodes: np.ndarray
    time_grid: TimeGrid
    values: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.space_nodes, dtype=float)
        if v.ndim != 1 or v.size < 3:
            raise ConfigurationError("pdie space grid needs at least 3 nodes")
        if np.any(np.diff(v) <= 0):
            raise ConfigurationError("pdie space nodes must be strictly increasing")
        self.space_nodes = v
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=float)
            if self.values.shape != (len(self.time_grid), v.size):
                raise ConfigurationError("pdie values shape does not match the grids")
            if not np.all(np.isfinite(self.values)):
                raise ConfigurationError("pdie values must be finite")

    @classmethod
    def uniform(cls, v_min, v_max, n_space, T, n_steps):
        return cls(np.linspace(v_min, v_max, n_space), TimeGrid.uniform(T, n_steps))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "v", "u"])
        for i, t in enumerate(self.time_grid.nodes):
            for k, v in enumerate(self.space_nodes):
                w.writerow([f"{t:.17g}", f"{v:.17g}", f"{self.values[i, k]:.17g}"])
        return buf.getvalue()


def first_derivative(phi, v):
    return np.gradient(phi, v, edge_order=2)


def second_derivative(phi, v):
    """Three-point second difference; boundary rows use the quadratic through the nearest three nodes."""
    phi = np.asarray(phi, dtype=float)
    h = np.diff(v)
    out = np.empty_like(phi)
    hl, hr = h[:-1], h[1:]
    out[1:-1] = 2 * (hl * phi[2:] - (hl + hr) * phi[1:-1] + hr * phi[:-2]) / (hl * hr * (hl + hr))
    out[0] = _edge_second(phi[:3], v[:3])
    out[-1] = _edge_second(phi[-3:], v[-3:])
    return out


def _edge_second(p, x):
    h0, h1 = x[1] - x[0], x[2] - x[1]
    return 2 * (h0 * p[2] - (h0 + h1) * p[1] + h1 * p[0]) / (h0 * h1 * (h0 + h1))


def _interp(phi, v):
    return PchipInterpolator(v, phi, extrapolate=False)


def _shift_values(phi, v, forward, marks):
    """``phi(v + beta(v, x_j))`` per atom (columns), targets clipped to the grid; also the clip mask."""
    if marks.size == 0:
        return np.zeros((v.size, 0)), np.zeros((v.size, 0), dtype=bool)
    targets = np.stack([forward.jump(v, x) for x in marks], axis=1) + v[:, None]
    clipped = (targets < v[0]) | (targets > v[-1])
    vals = _interp(phi, v)(np.clip(targets, v[0], v[-1]))
    return vals, clipped


def apply_A(phi, forward: ForwardSpec, v):
    """``sigma^2/2 phi'' + b phi'`` with central differences and one-sided boundary stencils."""
    v = np.asarray(v, dtype=float)
    if v.size < 3:
        raise ConfigurationError("apply_A needs at least 3 space nodes")
    return 0.5 * forward.sigma(v) ** 2 * second_derivative(phi, v) + forward.b(v) * first_derivative(phi, v)


def apply_K(phi, forward: ForwardSpec, atoms, v, diagnostics=None):
    """``sum_j [phi(v + beta_j) - phi(v) - beta_j phi'(v)] lambda_j``."""
    v = np.asarray(v, dtype=float)
    phi = np.asarray(phi, dtype=float)
    marks, lam = atom_arrays(atoms)
    if marks.size == 0:
        return np.zeros_like(phi)
    shifted, clipped = _shift_values(phi, v, forward, marks)
    beta = np.stack([forward.jump(v, x) for x in marks], axis=1)
    dphi = first_derivative(phi, v)
    if diagnostics is not None:
        diagnostics["clipped_targets"] = int(clipped.sum())
    return ((shifted - phi[:, None] - beta * dphi[:, None]) * lam).sum(axis=1)


def apply_B(phi, forward: ForwardSpec, atoms, v, diagnostics=None):
    """``sum_j [phi(v + beta_j) - phi(v)] kappa(x_j) lambda_j``."""
    v = np.asarray(v, dtype=float)
    phi = np.asarray(phi, dtype=float)
    marks, lam = atom_arrays(atoms)
    if marks.size == 0:
        return np.zeros_like(phi)
    shifted, clipped = _shift_values(phi, v, forward, marks)
    if diagnostics is not None:
        diagnostics["clipped_targets"] = int(clipped.sum())
    return ((shifted - phi[:, None]) * kappa(marks) * lam).sum(axis=1)


def diffusion_matrix(forward: ForwardSpec, v):
    """Sparse ``A_h`` used implicitly: a monotone (M-matrix) discretization.

    Interior rows use central differences, switching to upwind drift where the
    cell Peclet number exceeds one. Boundary rows drop the curvature term and
    keep only inward upwind drift, so linear data are preserved.
    """
    M = v.size
    h = np.diff(v)
    sig2 = forward.sigma(v) ** 2
    b = forward.b(v)
    lo = np.zeros(M)
    di = np.zeros(M)
    up = np.zeros(M)
    hl, hr = h[:-1], h[1:]
    s = sig2[1:-1]
    bb = b[1:-1]
    c_l = s / (hl * (hl + hr))
    c_r = s / (hr * (hl + hr))
    central = np.abs(bb) * np.maximum(hl, hr) <= s
    dl = np.where(central, -bb * hr / (hl * (hl + hr)), np.where(bb < 0, -bb / hl, 0.0))
    dr = np.where(central, bb * hl / (hr * (hl + hr)), np.where(bb > 0, bb / hr, 0.0))
    lo[1:-1] = c_l + dl
    up[1:-1] = c_r + dr
    di[1:-1] = -(c_l + c_r) - (dl + dr)
    # boundary: u'' = 0, drift only when it points inward
    up[0] = max(b[0], 0.0) / h[0]
    di[0] = -up[0]
    lo[-1] = max(-b[-1], 0.0) / h[-1]
    di[-1] = -lo[-1]
    return sparse.diags([lo[1:], di, up[:-1]], [-1, 0, 1], format="csc")


def _stability_rate(spec, v, t, phi, forward, marks, lam):
    sig = forward.sigma(v)
    h = np.minimum(np.r_[np.diff(v), np.inf], np.r_[np.inf, np.diff(v)])
    shifted, _ = _shift_values(phi, v, forward, marks)
    U = shifted - phi[:, None]
    z = sig * first_derivative(phi, v)
    fy, fz, fU = spec.linearize(v[:, None], t, phi, z, U, marks, lam)
    rate = np.abs(fy) + np.abs(fz) * sig / h
    if marks.size:
        rate = rate + 2 * np.abs(fU).sum(axis=1)
    return rate


def solve_pdie(forward: ForwardSpec, spec: GeneratorSpec, g_terminal, pgrid, atoms=(), *,
               check_stability: bool = True) -> PdieGrid:
    """Backward IMEX sweep; ``pgrid`` supplies the space nodes and the time grid.

    The nonlinearity is ``f~(v, t, y, p, w) = f(v, t, y, sigma(v) p, G(t, U))`` with
    ``U_j = u(v + beta_j) - u(v)``, so ``w`` equals ``B u`` when ``g(t, u) = u``.
    """
    if isinstance(pgrid, tuple):
        pgrid = PdieGrid(*pgrid)
    v = pgrid.space_nodes
    grid = pgrid.time_grid
    marks, lam = atom_arrays(atoms)
    N = grid.n_steps
    sig = forward.sigma(v)
    lam_total = float(lam.sum())
    A_h = diffusion_matrix(forward, v)
    eye = sparse.identity(v.size, format="csc")
    factors = {}

    vals = np.empty((N + 1, v.size))
    vals[N] = np.asarray(g_terminal(v), dtype=float) * np.ones(v.size)
    diag = {"clipped_targets": 0, "max_rate_dt": 0.0}
    for i in range(N - 1, -1, -1):
        dt = float(grid.dt[i])
        t = float(grid.nodes[i])
        phi = vals[i + 1]
        if check_stability:
            rate = _stability_rate(spec, v, t, phi, forward, marks, lam)
            worst = float(dt * (lam_total + rate.max()))
            diag["max_rate_dt"] = max(diag["max_rate_dt"], worst)
            if worst > 1.0:
                need = 1.0 / (lam_total + float(rate.max()))
                raise StabilityError(
                    f"explicit part unstable at t={t:.6g}: dt*(sum lambda + rate) = {worst:.3g} > 1; "
                    f"use dt <= {need:.3e}", required_dt=need)
        shifted, clipped = _shift_values(phi, v, forward, marks)
        diag["clipped_targets"] += int(clipped.sum())
        U = shifted - phi[:, None]
        z = sig * first_derivative(phi, v)
        rhs = phi + dt * spec.evaluate(v[:, None], t, phi, z, U, marks, lam)
        if marks.size:
            rhs = rhs + dt * apply_K(phi, forward, atoms, v)
        key = round(dt, 15)
        if key not in factors:
            factors[key] = splu((eye - dt * A_h).tocsc())
        vals[i] = factors[key].solve(rhs)
    out = PdieGrid(v, grid, vals, diag)
    return out


@dataclass
class CrossValidationReport:
    max_error: float
    l2_error: float
    profile: np.ndarray
    times: np.ndarray
    compared_nodes: np.ndarray

    def as_dict(self):
        return {"check": "pdie_cross_validation", "ok": True, "worst": self.max_error,
                "location": None, "l2_error": self.l2_error,
                "profile": [[float(t), float(e)] for t, e in zip(self.times, self.profile)]}


def cross_validate(pgrid: PdieGrid, fbsde: DiscreteSolution, v_range=None) -> CrossValidationReport:
    """Compare the PDIE grid with a lattice solution at shared time nodes and space nodes in ``v_range``.

    ``v_range`` defaults to the inner half of the space grid.
    """
    if fbsde.kind != "lattice":
        raise ConfigurationError("cross validation needs a lattice solution")
    if pgrid.values is None:
        raise ConfigurationError("pdie grid has no values")
    if not np.array_equal(pgrid.space_nodes, fbsde.states):
        raise ConfigurationError("pdie space nodes differ from the solution lattice")
    pt, st = pgrid.time_grid.nodes, fbsde.grid.nodes
    idx = np.clip(np.searchsorted(pt, st), 1, pt.size - 1)
    idx = np.where(np.abs(pt[idx - 1] - st) <= np.abs(pt[idx] - st), idx - 1, idx)
    if not np.allclose(pt[idx], st, rtol=0, atol=1e-12 * max(1.0, pt[-1])):
        raise ConfigurationError("solution time nodes are not a subset of the pdie time nodes")
    v = pgrid.space_nodes
    if v_range is None:
        span = v[-1] - v[0]
        v_range = (v[0] + 0.25 * span, v[-1] - 0.25 * span)
    sel = (v >= v_range[0] - 1e-12) & (v <= v_range[1] + 1e-12)
    if not sel.any():
        raise ConfigurationError("v_range contains no space nodes")
    err = np.abs(pgrid.values[idx][:, sel] - fbsde.Y[:, sel])
    profile = err.max(axis=1)
    return CrossValidationReport(float(profile.max()), float(np.sqrt(np.mean(err**2))), profile, st, v[sel])


@dataclass
class ForwardConditionsReport:
    ok: bool
    conditions: dict
    witnesses: dict
    values: dict

    def as_dict(self):
        return {"check": "forward_conditions", "ok": self.ok, "worst": None, "location": self.witnesses,
                "conditions": self.conditions}


def check_forward_conditions(forward: ForwardSpec, sample_box, atoms=(), *, c=100.0, c_prime=1e3,
                             c_tilde=1e3, c_tilde_prime=1e3, n=201, seed=0) -> ForwardConditionsReport:
    """Sample the sufficient conditions for a bounded Brownian-direction derivative of the forward.

    ``sample_box`` is ``(psi_min, psi_max)``; derivatives of ``b``, ``sigma``
    and ``beta`` are taken by central differences. The constants are the
    bounds each condition is checked against.
    """
    lo, hi = map(float, sample_box)
    rng = np.random.default_rng(seed)
    psi = np.unique(np.concatenate([np.linspace(lo, hi, n), rng.uniform(lo, hi, n)]))
    marks, lam = atom_arrays(atoms)
    h = 1e-5 * max(1.0, hi - lo)
    sig = forward.sigma(psi)
    s1 = (forward.sigma(psi + h) - forward.sigma(psi - h)) / (2 * h)
    s2 = (forward.sigma(psi + h) - 2 * sig + forward.sigma(psi - h)) / h**2
    b = forward.b(psi)
    b1 = (forward.b(psi + h) - forward.b(psi - h)) / (2 * h)
    if marks.size:
        beta = np.stack([forward.jump(psi, x) for x in marks], axis=1)
        dbeta = np.stack([(forward.jump(psi + h, x) - forward.jump(psi - h, x)) / (2 * h) for x in marks], axis=1)
    else:
        beta = dbeta = np.zeros((psi.size, 0))

    conds, wit, vals = {}, {}, {}
    asig = np.abs(sig)
    bad = (asig < 1 / c) | (asig > c)
    conds["sigma bounded above and away from 0"] = not bad.any()
    vals["sigma_range"] = (float(asig.min()), float(asig.max()))
    if bad.any():
        k = int(np.argmin(asig)) if asig.min() < 1 / c else int(np.argmax(asig))
        wit["sigma bounded above and away from 0"] = float(psi[k])

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sig != 0, s1 / sig, np.inf * np.abs(s1))
        combo = 0.5 * s1**2 - np.where(sig != 0, s1 * b / sig, 0.0) - 0.5 * sig * s2
        if marks.size:
            combo = combo + (ratio[:, None] * beta * lam).sum(axis=1)
    combo = np.nan_to_num(combo, nan=np.inf)
    conds["drift-diffusion combination bounded"] = bool(np.all(combo <= c_prime))
    vals["combination_max"] = float(combo.max())
    if not conds["drift-diffusion combination bounded"]:
        wit["drift-diffusion combination bounded"] = float(psi[int(np.argmax(combo))])

    if marks.size:
        k = np.unravel_index(int(np.argmin(beta)), beta.shape)
        conds["beta >= 0"] = bool(beta[k] >= 0)
        if not conds["beta >= 0"]:
            wit["beta >= 0"] = (float(psi[k[0]]), float(marks[k[1]]))
    else:
        conds["beta >= 0"] = True

    drift_combo = b1 - 0.5 * s1**2
    conds["b' - sigma'^2/2 bounded"] = bool(np.all(drift_combo <= c_tilde))
    if not conds["b' - sigma'^2/2 bounded"]:
        wit["b' - sigma'^2/2 bounded"] = float(psi[int(np.argmax(drift_combo))])

    if marks.size:
        bad = (dbeta <= -1) | (dbeta > 1e-9)
        conds["-1 < d beta <= 0"] = not bad.any()
        if bad.any():
            k = np.unravel_index(int(np.argmax(bad)), bad.shape)
            wit["-1 < d beta <= 0"] = (float(psi[k[0]]), float(marks[k[1]]))
        integral = -(dbeta * lam).sum(axis=1)
        conds["-int d beta nu bounded"] = bool(np.all(integral <= c_tilde_prime))
    else:
        conds["-1 < d beta <= 0"] = True
        conds["-int d beta nu bounded"] = True
    return ForwardConditionsReport(all(conds.values()), conds, wit, vals)
