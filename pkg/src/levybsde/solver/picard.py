"""Picard iteration with least-squares regression on a path bundle."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import ConfigurationError
from ..generator import GeneratorSpec, TerminalSpec
from ..levy import LevyTriplet, PathBundle
from .types import DiscreteSolution

logger = logging.getLogger(__name__)

RIDGE = 1e-8
COND_FLOOR = 1e-12


@dataclass(frozen=True)
class PolynomialBasis:
    """Total-degree polynomials in standardized features of the path history.

    ``features`` is ``"state"`` (X_t only), ``"state+average"`` (X_t and the
    running mean of the path) or a callable ``(history (n, i+1), t) -> (n, k)``.
    """

    degree: int = 3
    features: object = "state"

    @classmethod
    def from_descriptor(cls, desc):
        """Accepts ``None``, a basis object, a degree, ``"hat"`` or a dict with ``kind``."""
        if desc is None:
            return cls()
        if isinstance(desc, (PolynomialBasis, HatBasis)):
            return desc
        if isinstance(desc, int) and not isinstance(desc, bool):
            return cls(degree=desc)
        if desc == "hat":
            return HatBasis()
        if isinstance(desc, dict):
            kind = desc.get("kind", "polynomial")
            if kind == "hat":
                return HatBasis(n_knots=int(desc.get("knots", HatBasis.n_knots)))
            if kind == "polynomial":
                return cls(degree=int(desc.get("degree", 3)), features=desc.get("features", "state"))
            raise ConfigurationError(f"solver.basis.kind: unknown {kind!r}")
        raise ConfigurationError(f"solver.basis: cannot interpret {desc!r}")

    def raw_features(self, history, t):
        if callable(self.features):
            return np.asarray(self.features(history, t), dtype=float).reshape(history.shape[0], -1)
        if self.features == "state":
            return history[:, -1:]
        if self.features == "state+average":
            return np.column_stack([history[:, -1], history.mean(axis=1)])
        raise ConfigurationError(f"solver.basis.features: unknown {self.features!r}")

    def design(self, history, t):
        feats = self.raw_features(history, t)
        std = feats.std(axis=0)
        keep = std > 1e-12 * (1.0 + np.abs(feats.mean(axis=0)))
        cols = [np.ones(feats.shape[0])]
        if np.any(keep):
            s = (feats[:, keep] - feats[:, keep].mean(axis=0)) / std[keep]
            k = s.shape[1]
            for deg in range(1, self.degree + 1):
                for combo in _monomials(k, deg):
                    cols.append(np.prod(s[:, combo], axis=1) if len(combo) > 1 else s[:, combo[0]])
        return np.column_stack(cols)


@dataclass(frozen=True)
class HatBasis:
    """Piecewise-linear tent functions in the current state, knots at empirical quantiles.

    The outer tents are flat beyond the extreme knots, so fitted values never
    extrapolate past what the interior data supports.
    """

    n_knots: int = 12

    def __post_init__(self):
        if self.n_knots < 2:
            raise ConfigurationError("solver.basis.knots must be >= 2")

    def design(self, history, t):
        x = np.asarray(history, dtype=float)[:, -1]
        knots = np.unique(np.quantile(x, np.linspace(0.0, 1.0, self.n_knots)))
        if knots.size < 2:
            return np.ones((x.size, 1))
        xc = np.clip(x, knots[0], knots[-1])
        j = np.clip(np.searchsorted(knots, xc, side="right") - 1, 0, knots.size - 2)
        w = (xc - knots[j]) / (knots[j + 1] - knots[j])
        B = np.zeros((x.size, knots.size))
        rows = np.arange(x.size)
        B[rows, j] = 1.0 - w
        B[rows, j + 1] += w
        return B


def _monomials(k, deg):
    from itertools import combinations_with_replacement

    return [list(c) for c in combinations_with_replacement(range(k), deg)]


class _Projector:
    """Least squares onto a fixed design via a cached Cholesky factor of its Gram matrix."""

    def __init__(self, design):
        self.D = design
        n = design.shape[0]
        gram = design.T @ design / n
        eig = np.linalg.eigvalsh(gram)
        self.ridged = bool(eig[0] <= COND_FLOOR * max(eig[-1], 1e-300))
        if self.ridged:
            gram = gram + RIDGE * np.eye(gram.shape[0])
        self.factor = cho_factor(gram)
        self.n = n

    def coef(self, target):
        return cho_solve(self.factor, self.D.T @ target / self.n)

    def fit(self, target):
        return self.D @ self.coef(target)


def _zu_design(B, dW, dN, use_w):
    blocks = [B]
    if use_w:
        blocks.append(B * dW[:, None])
    for j in range(dN.shape[1]):
        blocks.append(B * dN[:, j:j + 1])
    return np.hstack(blocks)


def _split_zu(coef, B, use_w, J):
    k = B.shape[1]
    pos = k
    if use_w:
        z = B @ coef[pos:pos + k]
        pos += k
    else:
        z = np.zeros(B.shape[0])
    u = np.empty((B.shape[0], J))
    for j in range(J):
        u[:, j] = B @ coef[pos:pos + k]
        pos += k
    return z, u


def picard_core(
    bundle: PathBundle,
    driver: Callable,
    terminal_values: np.ndarray,
    *,
    start: int = 0,
    basis=None,
    tol: float = 1e-6,
    max_iter: int = 50,
    control_variate: bool = True,
):
    """Regression Picard iteration for ``Y_i = E_i[xi + sum_{k>=i} F_k dt_k]``.

    ``driver(i, y, z, u)`` returns the driver on interval ``i`` for iterate values.
    Nodes before ``start`` are left at zero. Returns ``(Y, Z, U, info)``.
    """
    basis = PolynomialBasis.from_descriptor(basis)
    grid = bundle.grid
    N, n, J = grid.n_steps, bundle.n_paths, bundle.model.n_atoms
    dt = grid.dt
    use_w = bundle.model.sigma > 0
    dW = bundle.brownian_increments
    dN = bundle.compensated_counts

    proj_y = {}
    proj_zu = {}
    designs = {}
    ridged = []
    for i in range(start, N):
        B = basis.design(bundle.values[:, : i + 1], grid.nodes[i])
        designs[i] = B
        proj_y[i] = _Projector(B)
        proj_zu[i] = _Projector(_zu_design(B, dW[:, i], dN[:, i, :], use_w))
        if proj_y[i].ridged or proj_zu[i].ridged:
            ridged.append(i)

    Y = np.zeros((N + 1, n))
    Z = np.zeros((N, n))
    U = np.zeros((N, n, J))
    Y[N] = terminal_values
    history = []
    best = None
    se = np.zeros(N + 1)
    converged = False

    for it in range(1, max_iter + 1):
        F = np.zeros((N, n))
        for i in range(start, N):
            F[i] = driver(i, Y[i], Z[i], U[i])
        Y_new = np.zeros_like(Y)
        Y_new[N] = terminal_values
        acc = terminal_values.astype(float).copy()
        for i in range(N - 1, start - 1, -1):
            acc = acc + F[i] * dt[i]
            if control_variate:
                acc = acc - Z[i] * dW[:, i]
                if J:
                    acc = acc - np.einsum("pj,pj->p", U[i], dN[:, i, :])
            Y_new[i] = proj_y[i].fit(acc)
            se[i] = float(np.std(acc - Y_new[i]) / math.sqrt(n))
        Z_new = np.zeros_like(Z)
        U_new = np.zeros_like(U)
        for i in range(start, N):
            coef = proj_zu[i].coef(Y_new[i + 1])
            Z_new[i], U_new[i] = _split_zu(coef, designs[i], use_w, J)
        diff = float(np.sqrt(np.mean((Y_new[start:] - Y[start:]) ** 2)))
        Y, Z, U = Y_new, Z_new, U_new
        history.append(diff)
        if best is None or diff < best[0]:
            best = (diff, Y.copy(), Z.copy(), U.copy())
        logger.debug("picard iteration %d: successive difference %.3e", it, diff)
        if diff < tol:
            converged = True
            break
    if not converged:
        logger.warning("picard iteration stopped after %d iterations (difference %.3e)", max_iter, history[-1])
        _, Y, Z, U = best
    info = {"iterations": len(history), "history": history, "y_se": se, "ridge_nodes": ridged,
            "ridge_fallback": bool(ridged), "converged": converged}
    return Y, Z, U, info


def solve_picard_regression(
    model: LevyTriplet,
    spec: GeneratorSpec,
    terminal: TerminalSpec,
    bundle: PathBundle,
    basis=None,
    tol: float = 1e-6,
    max_iter: int = 50,
    *,
    control_variate: bool = True,
) -> DiscreteSolution:
    """Solve the BSDE on ``bundle`` by regression Picard iteration.

    ``Z`` and ``U`` on interval ``i`` come from one joint regression of
    ``Y_{i+1}`` on the basis and its products with ``dW_i`` and the
    compensated counts, the least-squares form of the weight estimators
    ``E_i[Y_{i+1} dW_i]/dt`` and ``E_i[Y_{i+1} dN~_ij]/(lambda_j dt)``.
    """
    if model != bundle.model:
        raise ConfigurationError("bundle was sampled from a different model")
    marks, lam = model.marks, model.intensities
    values = bundle.values
    nodes = bundle.grid.nodes

    def driver(i, y, z, u):
        return spec.evaluate(values[:, : i + 1], float(nodes[i]), y, z, u, marks, lam)

    xi = terminal.evaluate(values)
    Y, Z, U, info = picard_core(bundle, driver, xi, basis=basis, tol=tol, max_iter=max_iter,
                                control_variate=control_variate)
    return DiscreteSolution(bundle.grid, Y, Z, U, marks, "paths", bundle=bundle,
                            diagnostics=info, converged=info["converged"])


def martingale_residual(sol: DiscreteSolution, spec: GeneratorSpec):
    """Per-node path mean of ``Y_i + sum_{k<i} f_k dt_k`` and its standard error."""
    b = sol.bundle
    if b is None:
        raise ConfigurationError("martingale residual needs a path solution")
    nodes, dt = b.grid.nodes, b.grid.dt
    marks, lam = b.model.marks, b.model.intensities
    n_steps = b.grid.n_steps
    acc = np.zeros(b.n_paths)
    means, ses = [], []
    for i in range(n_steps + 1):
        m = sol.Y[i] + acc
        means.append(float(m.mean()))
        ses.append(float(m.std() / math.sqrt(b.n_paths)))
        if i < n_steps:
            acc = acc + dt[i] * spec.evaluate(b.values[:, : i + 1], float(nodes[i]), sol.Y[i], sol.Z[i], sol.U[i], marks, lam)
    return np.array(means), np.array(ses)
