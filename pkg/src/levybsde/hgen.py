"""Generators of the form ``phi(fbar(t, y, z, G(U)), sum_j H(U_j) nu_j)`` and their
limit through the cutoff sequence ``H(u) min(1, n|x|)``."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DomainError
from .generator import (GeneratorSpec, TerminalSpec, compute_bounds, smooth_clamp,
                        smooth_clamp_deriv, _as_col)
from .levy import LevyTriplet, PathBundle, TimeGrid, atom_arrays, kappa, kappa_n
from .solver.markov import solve_markov_dp
from .solver.picard import solve_picard_regression
from .solver.types import DiscreteSolution, ForwardSpec

logger = logging.getLogger(__name__)

SERIES_CUTOFF = 1e-4
DEFAULT_SCHEDULE = tuple(2**k for k in range(11))


def H_alpha(u, alpha):
    """``(exp(alpha u) - alpha u - 1) / alpha``; a short series near 0."""
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    u = np.asarray(u, dtype=float)
    x = alpha * u
    small = np.abs(x) < SERIES_CUTOFF
    series = alpha * u * u / 2 * (1 + x / 3 + x * x / 12)
    with np.errstate(over="ignore"):
        direct = (np.expm1(x) - x) / alpha
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


def dH_alpha(u, alpha):
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    out = np.expm1(alpha * np.asarray(u, dtype=float))
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class HGeneratorSpec:
    base: GeneratorSpec
    H: Callable
    dH: Callable
    phi: Callable
    dphi_v: Callable
    dphi_w: Callable
    c_of: Callable[[float], float]
    name: str = "H-generator"


def exponential_utility_hspec(base: GeneratorSpec, alpha: float = 1.0) -> HGeneratorSpec:
    """``fbar + sum_j H_alpha(U_j) nu_j`` (``phi(v, w) = v + w``)."""
    alpha = float(alpha)
    if not alpha > 0:
        raise ConfigurationError("hlimit.alpha must be > 0")
    return HGeneratorSpec(
        base=base,
        H=lambda u: H_alpha(u, alpha),
        dH=lambda u: dH_alpha(u, alpha),
        phi=lambda v, w: np.asarray(v) + np.asarray(w),
        dphi_v=lambda v, w: np.ones(np.broadcast(np.asarray(v), np.asarray(w)).shape),
        dphi_w=lambda v, w: np.ones(np.broadcast(np.asarray(v), np.asarray(w)).shape),
        c_of=lambda R: alpha * math.exp(alpha * R),
        name=f"exp-utility({alpha})",
    )


@dataclass(frozen=True)
class CutoffGenerator(GeneratorSpec):
    """``f^n`` for one cutoff index ``n``; behaves like any ``GeneratorSpec`` in the solvers."""

    hspec: Optional[HGeneratorSpec] = None
    n: int = 1

    def _weights_n(self, marks, intensities):
        return kappa_n(marks, self.n) * intensities if marks.size else marks

    def _args(self, t, y, z, U, marks, intensities):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        U = np.asarray(U, dtype=float)
        if self.truncation is not None:
            R, Q, P = self.truncation
            Uc = smooth_clamp(U, 2 * R) if U.size else U
            w_raw = self.aggregate(t, Uc, marks, intensities)
            return smooth_clamp(y, R), smooth_clamp(z, Q), Uc, w_raw, smooth_clamp(w_raw, P)
        w = self.aggregate(t, U, marks, intensities)
        return y, z, U, w, w

    def h_aggregate(self, U, marks, intensities):
        U = np.asarray(U, dtype=float)
        if marks.size == 0:
            return np.zeros(U.shape[:-1])
        return np.asarray(self.hspec.H(U), dtype=float) @ self._weights_n(marks, intensities)

    def evaluate(self, x, t, y, z, U, marks, intensities):
        yc, zc, Uc, _, w = self._args(t, y, z, U, marks, intensities)
        fbar = np.asarray(self.base_f(_as_col(x), t, yc, zc, w), dtype=float)
        hw = self.h_aggregate(Uc, marks, intensities)
        return np.asarray(self.hspec.phi(fbar, hw), dtype=float) * np.ones_like(yc)

    def base_f(self, x, t, y, z, w):
        return self.f(x, t, y, z, w)

    def linearize(self, x, t, y, z, U, marks, intensities):
        x = _as_col(x)
        yc, zc, Uc, w_raw, w = self._args(t, y, z, U, marks, intensities)
        fbar = np.asarray(self.f(x, t, yc, zc, w), dtype=float)
        hw = self.h_aggregate(Uc, marks, intensities)
        pv = np.asarray(self.hspec.dphi_v(fbar, hw), dtype=float)
        pw = np.asarray(self.hspec.dphi_w(fbar, hw), dtype=float)
        fy = pv * self._partial("y", x, t, yc, zc, w)
        fz = pv * self._partial("z", x, t, yc, zc, w)
        fw = pv * self._partial("u", x, t, yc, zc, w)
        weights = kappa(marks) * intensities
        fU = fw[..., None] * self.g_deriv(t, Uc) * weights
        hU = pw[..., None] * np.asarray(self.hspec.dH(Uc), dtype=float) * self._weights_n(marks, intensities)
        if self.truncation is not None:
            R, Q, P = self.truncation
            fy = fy * smooth_clamp_deriv(y, R)
            fz = fz * smooth_clamp_deriv(z, Q)
            fU = fU * smooth_clamp_deriv(w_raw, P)[..., None]
            fU = (fU + hU) * smooth_clamp_deriv(np.asarray(U, float), 2 * R)
        else:
            fU = fU + hU
        return np.array(fy, float), np.array(fz, float), np.array(fU, float)


def build_cutoff_generator(hspec: HGeneratorSpec, n: int, atoms=None) -> CutoffGenerator:
    """``f^n(s, y, z, U) = phi(fbar(s, y, z, G(s, U)), sum_j H(U_j) kappa_n(x_j) lambda_j)``.

    The coefficient functions of ``hspec.base`` carry over unchanged, so the
    bound certificate does not depend on ``n``.
    """
    if int(n) != n or n < 1:
        raise DomainError(f"cutoff index n must be a positive integer, got {n}")
    b = hspec.base
    return CutoffGenerator(
        f=b.f, g=b.g, dg=b.dg, a=b.a, b=b.b, k_f=b.k_f, rho=b.rho, p=b.p,
        df_y=b.df_y, df_z=b.df_z, df_u=b.df_u, d_malliavin_f=b.d_malliavin_f,
        truncation=b.truncation, name=f"{hspec.name}[n={int(n)}]", hspec=hspec, n=int(n),
    )


@dataclass
class HAuditReport:
    ok: bool
    conditions: dict
    witnesses: dict

    def as_dict(self):
        return {"check": "hspec_audit", "ok": self.ok, "worst": None, "location": self.witnesses,
                "conditions": self.conditions}


def audit_hspec(hspec: HGeneratorSpec, box: float = 3.0, R_prime: float = 3.0, n: int = 2000,
                seed: int = 0, T: float = 1.0, dphi_w_bound: float = 1e6) -> HAuditReport:
    """Sampled checks of the four conditions on ``H``, ``phi`` and their products with ``fbar``."""
    rng = np.random.default_rng(seed)
    conds, wit = {}, {}
    h0 = float(np.asarray(hspec.H(np.zeros(1)))[0])
    conds["H(0)=0"] = abs(h0) <= 1e-14
    if not conds["H(0)=0"]:
        wit["H(0)=0"] = h0

    v = rng.uniform(-box, box, n)
    w = rng.uniform(-box, box, n)
    pv = np.asarray(hspec.dphi_v(v, w), dtype=float) * np.ones(n)
    k = int(np.argmax(np.abs(pv)))
    conds["|dphi_v|<=1"] = bool(np.abs(pv[k]) <= 1 + 1e-12)
    if not conds["|dphi_v|<=1"]:
        wit["|dphi_v|<=1"] = (float(v[k]), float(w[k]))
    # boundedness in v for fixed w, probed over a widening range
    vv = np.concatenate([v, 10 * v, 100 * v])
    pw = np.abs(np.asarray(hspec.dphi_w(vv, np.repeat(w[:1], vv.size)), dtype=float)) * np.ones(vv.size)
    conds["dphi_w bounded in v"] = bool(np.all(np.isfinite(pw)) and pw.max() <= dphi_w_bound)

    u = rng.uniform(-R_prime, R_prime, n)
    dh = np.abs(np.asarray(hspec.dH(u), dtype=float))
    bound = hspec.c_of(R_prime) * np.abs(u)
    bad = dh > bound * (1 + 1e-9) + 1e-14
    conds["|dH|<=c|u|"] = not bool(np.any(bad))
    if bad.any():
        wit["|dH|<=c|u|"] = float(u[np.argmax(bad)])

    base = hspec.base
    t = rng.uniform(0, T, n)
    y, z, uu, up, ww = rng.uniform(-box, box, (5, n))
    x = rng.uniform(-box, box, (n, 1))
    worst1 = worst2 = math.inf
    for i in range(n):
        xi = x[i:i + 1]
        fb = np.asarray(base.f(xi, t[i], y[i:i+1], z[i:i+1], uu[i:i+1]), dtype=float)
        dpv = np.asarray(hspec.dphi_v(fb, ww[i:i+1]), dtype=float)
        dpw = np.asarray(hspec.dphi_w(fb, ww[i:i+1]), dtype=float)
        fu = base._partial("u", xi, t[i], y[i:i+1], z[i:i+1], uu[i:i+1])
        gu = base.g_deriv(t[i], up[i:i+1])
        p1 = float((dpv * fu * gu)[0])
        p2 = p1 + float((dpw * np.asarray(hspec.dH(up[i:i+1]), dtype=float))[0])
        if p1 < worst1:
            worst1, wit["product1"] = p1, (float(t[i]), float(y[i]), float(z[i]), float(uu[i]), float(up[i]), float(ww[i]))
        if p2 < worst2:
            worst2, wit["product2"] = p2, (float(t[i]), float(y[i]), float(z[i]), float(uu[i]), float(up[i]), float(ww[i]))
    conds["product1>=-1"] = worst1 >= -1 - 1e-9
    conds["product2>=-1"] = worst2 >= -1 - 1e-9
    wit["worst_products"] = (worst1, worst2)
    return HAuditReport(all(conds.values()), conds, wit)


def pair_norms(a: DiscreteSolution, b: DiscreteSolution, intensities) -> tuple:
    """Discrete ``(|Y|_S2, |Z|_L2, |U|_L2(nu))`` norms of the difference of two solutions.

    The S2 norm is the root of the point average of ``sup_t |dY|^2``; the L2
    norms integrate squared differences in time and average over points.
    """
    dt = a.grid.dt
    dY = np.sqrt(np.mean(np.max((a.Y - b.Y) ** 2, axis=0)))
    nz = min(a.Z.shape[0], dt.size)
    dZ = np.sqrt(np.sum(dt[:nz, None] * (a.Z[:nz] - b.Z[:nz]) ** 2) / a.Y.shape[1])
    if a.U.shape[-1]:
        dU = np.sqrt(np.sum(dt[:nz, None, None] * (a.U[:nz] - b.U[:nz]) ** 2 * intensities) / a.Y.shape[1])
    else:
        dU = 0.0
    return float(dY), float(dZ), float(dU)


@dataclass
class HLimitResult:
    solution: DiscreteSolution
    table: list
    converged: bool
    certificate: object
    n_final: int
    diagnostics: dict = field(default_factory=dict)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "m", "dY", "dZ", "dU"])
        for row in self.table:
            w.writerow([row["n"], row["m"], f"{row['dY']:.17g}", f"{row['dZ']:.17g}", f"{row['dU']:.17g}"])
        return buf.getvalue()


def solve_H_limit(
    hspec: HGeneratorSpec,
    terminal: TerminalSpec,
    model: LevyTriplet,
    atoms=None,
    solver: str = "dp",
    settings: dict | None = None,
    n_schedule=DEFAULT_SCHEDULE,
    cauchy_tol: float = 1e-4,
    cert=None,
    truncate: bool = True,
) -> HLimitResult:
    """Solve along the cutoff schedule on shared randomness until consecutive norms sum below ``cauchy_tol``.

    ``solver`` is ``"dp"`` (settings: ``lattice``, ``time_grid``, optional
    ``forward``) or ``"picard"`` (settings: ``bundle``, ``basis``, ``tol``,
    ``max_iter``). The certificate is computed from the base generator.
    """
    settings = dict(settings or {})
    atoms = model.atoms if atoms is None else tuple(atoms)
    marks, lam = atom_arrays(atoms)
    sched = [int(n) for n in n_schedule]
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])) or sched[0] < 1:
        raise ConfigurationError("hlimit.schedule must be a strictly increasing list of positive integers")
    T = None
    if solver == "dp":
        grid = settings["time_grid"]
        T = grid.T
    elif solver == "picard":
        bundle: PathBundle = settings["bundle"]
        T = bundle.grid.T
    else:
        raise ConfigurationError(f"hlimit solver must be 'dp' or 'picard', got {solver!r}")
    if cert is None and math.isfinite(terminal.A_xi):
        cert = compute_bounds(hspec.base, terminal, atoms, T)

    def solve_one(n):
        gen = build_cutoff_generator(hspec, n, atoms)
        if truncate and cert is not None:
            gen = _with_truncation(gen, cert)
        if solver == "dp":
            forward = settings.get("forward") or ForwardSpec.from_levy(model)
            fn = terminal.state_fn
            if fn is None:
                raise ConfigurationError("lattice solver needs terminal.state_fn")
            return solve_markov_dp(forward, gen, fn, atoms, settings["lattice"], settings["time_grid"])
        return solve_picard_regression(model, gen, terminal, settings["bundle"], basis=settings.get("basis"),
                                       tol=settings.get("tol", 1e-6), max_iter=settings.get("max_iter", 50))

    table = []
    prev = solve_one(sched[0])
    prev_n = sched[0]
    converged = False
    for n in sched[1:]:
        cur = solve_one(n)
        dY, dZ, dU = pair_norms(prev, cur, lam)
        table.append({"n": prev_n, "m": n, "dY": dY, "dZ": dZ, "dU": dU})
        logger.info("H-limit pair (%d, %d): dY=%.3e dZ=%.3e dU=%.3e", prev_n, n, dY, dZ, dU)
        prev, prev_n = cur, n
        if dY + dZ + dU < cauchy_tol:
            converged = True
            break
    if not converged:
        logger.warning("cutoff schedule exhausted before reaching tolerance %.1e", cauchy_tol)
    prev.converged = prev.converged and converged
    return HLimitResult(prev, table, converged, cert, prev_n, {"schedule": sched, "cauchy_tol": cauchy_tol})


def _with_truncation(gen: CutoffGenerator, cert) -> CutoffGenerator:
    import dataclasses

    return dataclasses.replace(gen, truncation=(cert.R, cert.Q, cert.P))
