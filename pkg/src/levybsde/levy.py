"""Levy triplets with atomic jump measures, path bundles and path shifts.

The forward noise is ``X_t = gamma t + sigma W_t + sum_j x_j (N_j(t) - lambda_j t)``:
every atom is simulated compensated, so ``gamma`` is the drift of the fully
compensated process and ``E X_t = gamma t``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import ndtri

from .errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

Atom = tuple[float, float]


def kappa(x):
    """``min(1, |x|)``, vectorized."""
    return np.minimum(1.0, np.abs(x))


def kappa_n(x, n):
    """``min(1, n|x|)``, vectorized; ``n`` must be a positive integer."""
    if n < 1:
        raise DomainError(f"cutoff index n must be >= 1, got {n}")
    return np.minimum(1.0, n * np.abs(x))


def atom_arrays(atoms) -> tuple[np.ndarray, np.ndarray]:
    """Split an atom list (or a LevyTriplet) into mark and intensity arrays."""
    if isinstance(atoms, LevyTriplet):
        return atoms.marks, atoms.intensities
    atoms = list(atoms)
    if not atoms:
        return np.zeros(0), np.zeros(0)
    arr = np.asarray(atoms, dtype=float).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def l2_nu_norm(values, intensities) -> float:
    """L2(nu) norm of a function sampled at the atoms: sqrt(sum h_j^2 lambda_j)."""
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(np.sum(values**2 * intensities)))


@dataclass(frozen=True)
class LevyTriplet:
    """Drift, diffusion coefficient and a finite atomic Levy measure.

    Atoms are stored in canonical order (strictly increasing marks).
    """

    gamma: float
    sigma: float
    atoms: tuple[Atom, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ConfigurationError("model.gamma must be finite")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ConfigurationError(f"model.sigma must be finite and >= 0, got {self.sigma}")
        cleaned = []
        for i, atom in enumerate(self.atoms):
            try:
                mark, lam = (float(a) for a in atom)
            except (TypeError, ValueError):
                raise ConfigurationError(f"model.atoms[{i}] must be a (mark, intensity) pair") from None
            if mark == 0 or not math.isfinite(mark):
                raise ConfigurationError(f"model.atoms[{i}].mark must be finite and nonzero, got {mark}")
            if not (math.isfinite(lam) and lam > 0):
                raise ConfigurationError(
                    f"model.atoms[{i}].intensity must be finite and > 0, got {lam}"
                )
            cleaned.append((mark, lam))
        cleaned.sort()
        marks = [m for m, _ in cleaned]
        if len(set(marks)) != len(marks):
            raise ConfigurationError("model.atoms contains duplicate marks")
        object.__setattr__(self, "atoms", tuple(cleaned))

    @property
    def marks(self) -> np.ndarray:
        return np.array([m for m, _ in self.atoms], dtype=float)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([lam for _, lam in self.atoms], dtype=float)

    @property
    def total_intensity(self) -> float:
        return float(self.intensities.sum())

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def mean(self, t: float) -> float:
        return self.gamma * t

    def variance(self, t: float) -> float:
        return t * (self.sigma**2 + float(np.sum(self.marks**2 * self.intensities)))


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes ``0 = t_0 < ... < t_N = T``."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ConfigurationError("time grid needs at least 2 nodes")
        if not np.all(np.isfinite(nodes)):
            raise ConfigurationError("time grid nodes must be finite")
        if nodes[0] != 0.0:
            raise ConfigurationError("time grid must start at 0")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigurationError("time grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> "TimeGrid":
        if not (T > 0) or n_steps < 1:
            raise ConfigurationError(f"uniform grid needs T > 0 and n_steps >= 1 (got {T}, {n_steps})")
        return cls(np.linspace(0.0, T, n_steps + 1))

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    def __len__(self):
        return self.nodes.size

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.nodes.shape == other.nodes.shape and bool(np.all(self.nodes == other.nodes))

    def __hash__(self):
        return hash(self.nodes.tobytes())

    def first_index_at_or_after(self, r: float) -> int:
        """Index of the first node ``>= r`` (the cadlag diagonal convention)."""
        if not (0.0 <= r <= self.T):
            raise DomainError(f"time {r} outside [0, {self.T}]")
        idx = int(np.searchsorted(self.nodes, r - 1e-12 * max(1.0, self.T), side="left"))
        return min(idx, self.nodes.size - 1)


@dataclass(frozen=True)
class PathBundle:
    """Sampled forward paths together with the noise that generated them.

    Arrays are indexed ``[path, interval]`` for increments,
    ``[path, interval, atom]`` for jump counts and ``[path, node]`` for values.
    ``shift`` records a Malliavin path shift ``(r, v)`` applied after sampling.
    """

    model: LevyTriplet
    grid: TimeGrid
    n_paths: int
    brownian_increments: np.ndarray
    jump_counts: np.ndarray
    values: np.ndarray
    seed: int
    shift: tuple[float, float] | None = None

    @property
    def compensated_counts(self) -> np.ndarray:
        """``Delta N_ij - lambda_j Delta t_i`` per (path, interval, atom)."""
        lam_dt = self.grid.dt[:, None] * self.model.intensities[None, :]
        return self.jump_counts - lam_dt[None, :, :]

    def increment_residual(self) -> float:
        """Max deviation of the value increments from the noise decomposition."""
        m = self.model
        dt = self.grid.dt
        expected = m.gamma * dt[None, :] + m.sigma * self.brownian_increments
        if m.n_atoms:
            expected = expected + np.einsum("pij,j->pi", self.compensated_counts, m.marks)
        got = np.diff(self.values, axis=1)
        if self.shift is not None:
            r, v = self.shift
            k = self.grid.first_index_at_or_after(r)
            if k > 0:
                got[:, k - 1] -= v
            else:
                got = got.copy()
        return float(np.max(np.abs(got - expected))) if got.size else 0.0


def _path_generator(seed: int, path_index: int) -> np.random.Generator:
    # Philox is counter-based: the key carries the seed, the top counter word
    # the path index, so each path owns a disjoint substream.
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(path_index)]))


def _open_uniform(u: np.ndarray) -> np.ndarray:
    return np.where(u <= 0.0, 2.0**-54, u)


def poisson_inverse(u: np.ndarray, mean) -> np.ndarray:
    """Poisson quantiles by sequential CDF inversion (small means)."""
    u = np.asarray(u, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), u.shape)
    k = np.zeros(u.shape, dtype=np.int64)
    p = np.exp(-mean)
    cdf = p.copy()
    active = u > cdf
    step = 0
    while np.any(active):
        step += 1
        p = np.where(active, p * mean / step, p)
        cdf = np.where(active, cdf + p, cdf)
        k = np.where(active, k + 1, k)
        active = active & (u > cdf) & (p > 0)
        if step > 10_000:
            break
    return k


def sample_paths(model: LevyTriplet, grid: TimeGrid, n_paths: int, seed: int) -> PathBundle:
    """Sample ``n_paths`` paths of the Levy process on ``grid``.

    Path ``p`` depends only on ``(model, grid, seed, p)``: it is identical for
    every bundle size ``n_paths > p``.
    """
    if not isinstance(grid, TimeGrid):
        raise ConfigurationError("grid must be a TimeGrid")
    if int(n_paths) < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    n_paths = int(n_paths)
    n_int = grid.n_steps
    J = model.n_atoms
    dt = grid.dt

    uniforms = np.empty((n_paths, n_int * (1 + J)))
    for p in range(n_paths):
        uniforms[p] = _path_generator(seed, p).random(n_int * (1 + J))
    uniforms = _open_uniform(uniforms)

    dW = np.sqrt(dt)[None, :] * ndtri(uniforms[:, :n_int])
    if J:
        u_jump = uniforms[:, n_int:].reshape(n_paths, n_int, J)
        means = dt[:, None] * model.intensities[None, :]
        counts = poisson_inverse(u_jump, means[None, :, :]).astype(np.int32)
        comp = counts - means[None, :, :]
        jump_part = np.einsum("pij,j->pi", comp, model.marks)
    else:
        counts = np.zeros((n_paths, n_int, 0), dtype=np.int32)
        jump_part = 0.0

    incr = model.gamma * dt[None, :] + model.sigma * dW + jump_part
    values = np.zeros((n_paths, n_int + 1))
    np.cumsum(incr, axis=1, out=values[:, 1:])
    return PathBundle(model, grid, n_paths, dW, counts, values, int(seed))


def shift_values(values: np.ndarray, grid: TimeGrid, r: float, v: float) -> np.ndarray:
    """Return ``values + v * 1[t >= r]`` along the last axis (a copy)."""
    if not (0.0 <= r <= grid.T):
        raise DomainError(f"shift time r={r} outside [0, {grid.T}]")
    if v == 0:
        raise DomainError("shift size v must be nonzero")
    out = np.array(values, dtype=float, copy=True)
    k = grid.first_index_at_or_after(r)
    out[..., k:] += v
    return out


def shift_path(bundle: PathBundle, path_index: int, r: float, v: float) -> np.ndarray:
    """Values of path ``path_index`` shifted by ``v`` from time ``r`` on."""
    return shift_values(bundle.values[path_index], bundle.grid, r, v)


def shift_bundle(bundle: PathBundle, r: float, v: float) -> PathBundle:
    """Every path shifted by ``v`` on ``[r, T]``; the noise arrays are shared."""
    if bundle.shift is not None:
        raise DomainError("bundle is already shifted")
    values = shift_values(bundle.values, bundle.grid, r, v)
    return PathBundle(
        bundle.model,
        bundle.grid,
        bundle.n_paths,
        bundle.brownian_increments,
        bundle.jump_counts,
        values,
        bundle.seed,
        shift=(float(r), float(v)),
    )


@dataclass
class DensityDiscretization:
    atoms: list[Atom]
    discarded_second_moment: float
    cell_edges: list[np.ndarray] = field(default_factory=list)


def _quad(fn, lo, hi, what):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(fn, lo, hi, limit=200)
        except integrate.IntegrationWarning as exc:
            raise ConfigurationError(f"{what}: quadrature did not converge ({exc})") from None
    if not math.isfinite(val):
        raise ConfigurationError(f"{what}: integral is not finite")
    return val


def discretize_density_report(
    density: Callable[[float], float],
    support,
    n_atoms: int,
    small_jump_cutoff: float,
) -> DensityDiscretization:
    """Midpoint atoms with cell-integrated intensities, plus the truncated mass.

    ``support`` is one interval ``(lo, hi)`` or a sequence of intervals, none
    containing 0 in its interior. Jumps inside ``(-cutoff, cutoff)`` are
    dropped and their second moment ``int x^2 nu(dx)`` is reported.
    """
    if not (small_jump_cutoff > 0):
        raise ConfigurationError("small_jump_cutoff must be > 0")
    if int(n_atoms) < 1:
        raise ConfigurationError("n_atoms must be >= 1")
    support = list(support)
    if len(support) == 2 and all(np.isscalar(s) for s in support):
        intervals = [tuple(float(s) for s in support)]
    else:
        intervals = [tuple(float(s) for s in iv) for iv in support]
    c = float(small_jump_cutoff)

    kept = []
    discarded = 0.0
    for lo, hi in intervals:
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ConfigurationError("density support must be bounded")
        if not lo < hi:
            raise ConfigurationError(f"empty support interval ({lo}, {hi})")
        if lo < 0 < hi:
            raise ConfigurationError("support intervals must exclude 0; split at the origin")
        # pieces inside the small-jump window are discarded
        lo_in, hi_in = max(lo, -c), min(hi, c)
        if lo_in < hi_in:
            discarded += _quad(lambda x: x * x * density(x), lo_in, hi_in, "discarded mass")
        if hi <= -c or lo >= c:
            kept.append((lo, hi))
        elif lo < -c:
            kept.append((lo, -c))
        elif hi > c:
            kept.append((c, hi))

    total_len = sum(hi - lo for lo, hi in kept)
    atoms: list[Atom] = []
    edges_out = []
    for lo, hi in kept:
        n_cells = max(1, int(round(n_atoms * (hi - lo) / total_len))) if total_len > 0 else 0
        edges = np.linspace(lo, hi, n_cells + 1)
        edges_out.append(edges)
        for a, b in zip(edges[:-1], edges[1:]):
            mass = _quad(density, a, b, "atom intensity")
            if mass < 0:
                raise ConfigurationError("density must be nonnegative")
            if mass > 0:
                atoms.append((0.5 * (a + b), mass))
    logger.info("discretized density into %d atoms; discarded second moment %.3e", len(atoms), discarded)
    return DensityDiscretization(sorted(atoms), discarded, edges_out)


def discretize_density(
    density: Callable[[float], float],
    support,
    n_atoms: int,
    small_jump_cutoff: float,
) -> list[Atom]:
    """Atomic approximation of a Levy density (see ``discretize_density_report``)."""
    return discretize_density_report(density, support, n_atoms, small_jump_cutoff).atoms


def as_grid(grid_or_nodes: TimeGrid | Sequence[float]) -> TimeGrid:
    return grid_or_nodes if isinstance(grid_or_nodes, TimeGrid) else TimeGrid(np.asarray(grid_or_nodes))
