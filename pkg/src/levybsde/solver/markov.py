"""Backward dynamic programming on a state lattice for forward-Markov problems."""

from __future__ import annotations

import itertools
import logging
import math

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline
from scipy.stats import poisson

from ..errors import ConfigurationError, NumericalError
from ..generator import GeneratorSpec, truncate_generator
from ..levy import TimeGrid, atom_arrays
from .types import DiscreteSolution, ForwardSpec

logger = logging.getLogger(__name__)


def gauss_hermite_standard(order: int):
    """Nodes and weights integrating against the standard normal density."""
    x, w = hermegauss(order)
    return x, w / math.sqrt(2.0 * math.pi)


def jump_branches(intensities, dt, max_jumps=2):
    """All per-atom jump-count combinations up to ``max_jumps`` with renormalized weights.

    Returns ``(counts (C, J), probs (C,), truncation_error)`` where the error is
    the Poisson mass dropped before renormalization.
    """
    J = len(intensities)
    if J == 0:
        return np.zeros((1, 0), dtype=int), np.ones(1), 0.0
    ks = np.arange(max_jumps + 1)
    pmf = np.array([poisson.pmf(ks, lam * dt) for lam in intensities])  # (J, K)
    kept = pmf.sum(axis=1)
    err = 1.0 - float(np.prod(kept))
    pmf = pmf / kept[:, None]
    combos = np.array(list(itertools.product(ks, repeat=J)), dtype=int)
    probs = np.prod(pmf[np.arange(J)[None, :], combos], axis=1)
    return combos, probs, err


def _check_lattice(v):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size < 3:
        raise ConfigurationError("state lattice needs at least 3 nodes")
    if np.any(np.diff(v) <= 0):
        raise ConfigurationError("state lattice must be strictly increasing")
    return v


def lattice_z(values, v, sig):
    return sig * np.gradient(values, v, edge_order=2)


def lattice_u(spline, values, v, targets):
    """``u(v + beta) - u(v)`` per atom with targets clipped to the lattice."""
    if targets.shape[1] == 0:
        return np.zeros((v.size, 0))
    t = np.clip(targets, v[0], v[-1])
    return spline(t) - values[:, None]


def _fixed_point(step_fn, y0, tol, max_iter, where):
    """Solve ``Y = step_fn(Y)`` nodewise; damping 0.5 once the residual grows."""
    y = y0.copy()
    prev_res = math.inf
    damp = 1.0
    res = np.zeros_like(y)
    for it in range(1, max_iter + 1):
        y_new = step_fn(y)
        if damp < 1.0:
            y_new = damp * y_new + (1.0 - damp) * y
        res = np.abs(y_new - y)
        y = y_new
        r = float(np.max(res / np.maximum(1.0, np.abs(y))))
        if r <= tol:
            return y, it
        if r > prev_res and damp == 1.0:
            damp = 0.5
        prev_res = r
    k = int(np.argmax(res))
    raise NumericalError(f"implicit Y step did not converge {where(k)} (residual {float(res[k]):.3e})")


def solve_markov_dp(
    forward: ForwardSpec,
    spec: GeneratorSpec,
    terminal_fn,
    atoms,
    state_lattice,
    time_grid: TimeGrid,
    *,
    cert=None,
    gh_order: int = 16,
    max_jumps: int = 2,
    fp_tol: float = 1e-10,
    fp_max_iter: int = 50,
    escape_threshold: float = 1e-6,
) -> DiscreteSolution:
    """Backward recursion ``Y_i = E[u_{i+1}(Psi)] + dt f(v, t_i, Y_i, Z~, U~)`` on a lattice.

    The conditional expectation composes a Gauss-Hermite rule for the
    diffusion with Poisson branching (at most ``max_jumps`` per atom) and
    cubic-spline interpolation. ``Z~`` and ``U~`` in the driver come from the
    conditional expectation slice; stored ``Z`` and ``U`` are taken from the
    solved slice itself.
    """
    v = _check_lattice(state_lattice)
    grid = time_grid
    marks, lam = atom_arrays(atoms)
    if cert is not None and spec.truncation is None:
        spec = truncate_generator(spec, cert, atoms)

    zeta, w_gh = gauss_hermite_standard(gh_order)
    sig = forward.sigma(v)
    drift = forward.b(v)
    beta = np.stack([forward.jump(v, x) for x in marks], axis=1) if marks.size else np.zeros((v.size, 0))
    x_state = v[:, None]

    inner = (v >= v[0] + 0.25 * (v[-1] - v[0])) & (v <= v[-1] - 0.25 * (v[-1] - v[0]))
    diag = {"fp_iterations": [], "clipped_mass_max": 0.0, "clipped_mass_inner": 0.0,
            "jump_truncation_error": 0.0, "warnings": []}

    N = grid.n_steps
    J = marks.size
    Y = np.empty((N + 1, v.size))
    Z = np.empty((N + 1, v.size))
    U = np.empty((N + 1, v.size, J))

    y_T = np.asarray(terminal_fn(v), dtype=float) * np.ones(v.size)
    Y[N] = y_T
    spline = CubicSpline(v, y_T)
    Z[N] = lattice_z(y_T, v, sig)
    U[N] = lattice_u(spline, y_T, v, v[:, None] + beta)

    cache = {}
    for i in range(N - 1, -1, -1):
        dt = float(grid.dt[i])
        t = float(grid.nodes[i])
        key = round(dt, 15)
        if key not in cache:
            combos, probs, err = jump_branches(lam, dt, max_jumps)
            comp = combos - lam[None, :] * dt  # (C, J)
            dest = (v + drift * dt)[:, None, None] + (sig * math.sqrt(dt))[:, None, None] * zeta[None, :, None]
            dest = dest + (beta @ comp.T)[:, None, :]  # (M, Q, C)
            weights = w_gh[:, None] * probs[None, :]
            outside = (dest < v[0]) | (dest > v[-1])
            clipped = np.sum(outside * weights[None], axis=(1, 2))
            cache[key] = (np.clip(dest, v[0], v[-1]), weights, clipped, err)
        dest, weights, clipped, err = cache[key]
        diag["clipped_mass_max"] = max(diag["clipped_mass_max"], float(clipped.max()))
        diag["clipped_mass_inner"] = max(diag["clipped_mass_inner"], float(clipped[inner].max(initial=0.0)))
        diag["jump_truncation_error"] = max(diag["jump_truncation_error"], err)

        y_tilde = np.einsum("mqc,qc->m", spline(dest), weights)
        z_tilde = lattice_z(y_tilde, v, sig)
        u_tilde = lattice_u(CubicSpline(v, y_tilde), y_tilde, v, v[:, None] + beta)

        def step(y, t=t, dt=dt, y_tilde=y_tilde, z_tilde=z_tilde, u_tilde=u_tilde):
            return y_tilde + dt * spec.evaluate(x_state, t, y, z_tilde, u_tilde, marks, lam)

        y_i, its = _fixed_point(step, y_tilde, fp_tol, fp_max_iter,
                                lambda k, t=t: f"at t={t:.6g}, v={v[k]:.6g}")
        diag["fp_iterations"].append(its)
        Y[i] = y_i
        spline = CubicSpline(v, y_i)
        Z[i] = lattice_z(y_i, v, sig)
        U[i] = lattice_u(spline, y_i, v, v[:, None] + beta)

    if diag["clipped_mass_inner"] > escape_threshold:
        msg = (f"forward transitions leave the lattice from inner nodes with mass "
               f"{diag['clipped_mass_inner']:.3e}; widen the lattice")
        diag["warnings"].append(msg)
        logger.warning(msg)
    diag["max_fp_iterations"] = max(diag["fp_iterations"], default=0)
    return DiscreteSolution(grid, Y, Z, U, marks, "lattice", states=v, diagnostics=diag)
