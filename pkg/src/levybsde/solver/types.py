from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import ConfigurationError, NumericalError
from ..levy import LevyTriplet, PathBundle, TimeGrid, kappa


@dataclass(frozen=True)
class ForwardSpec:
    """Markov forward SDE ``dPsi = b(Psi) ds + sigma(Psi) dW + int beta(Psi-, x) dN~``."""

    b_coef: Callable
    sigma_coef: Callable
    beta: Callable
    C_beta: float = 1.0
    name: str = "custom"

    @classmethod
    def from_levy(cls, model: LevyTriplet) -> "ForwardSpec":
        marks = model.marks
        c_beta = float(np.max(np.abs(marks) / kappa(marks))) if marks.size else 1.0
        g, s = model.gamma, model.sigma
        return cls(
            b_coef=lambda v: np.full(np.shape(v), g),
            sigma_coef=lambda v: np.full(np.shape(v), s),
            beta=lambda v, x: np.broadcast_to(np.asarray(x, dtype=float), np.broadcast(np.asarray(v), np.asarray(x)).shape).copy(),
            C_beta=max(c_beta, 1.0),
            name="levy",
        )

    def b(self, v):
        return np.asarray(self.b_coef(np.asarray(v, dtype=float)), dtype=float) * np.ones(np.shape(v))

    def sigma(self, v):
        return np.asarray(self.sigma_coef(np.asarray(v, dtype=float)), dtype=float) * np.ones(np.shape(v))

    def jump(self, v, x):
        v = np.asarray(v, dtype=float)
        return np.asarray(self.beta(v, x), dtype=float) * np.ones(np.broadcast(v, np.asarray(x)).shape)

    def audit(self, box=(-3.0, 3.0), marks=(), n=200, lipschitz=None, seed=0) -> dict:
        """Sampled check of ``|beta| <= C_beta kappa(x)`` and finite-difference slopes.

        Returns ``{"ok", "beta_bound_ok", "max_slopes"}``; slopes are compared
        against ``lipschitz`` when it is given.
        """
        rng = np.random.default_rng(seed)
        v = np.sort(rng.uniform(box[0], box[1], n))
        ok_beta = True
        for x in np.atleast_1d(np.asarray(marks, dtype=float)):
            if np.any(np.abs(self.jump(v, x)) > self.C_beta * kappa(x) + 1e-12):
                ok_beta = False
        h = 1e-6
        slopes = {
            "b": float(np.max(np.abs(self.b(v + h) - self.b(v - h)) / (2 * h))),
            "sigma": float(np.max(np.abs(self.sigma(v + h) - self.sigma(v - h)) / (2 * h))),
        }
        for x in np.atleast_1d(np.asarray(marks, dtype=float)):
            slopes[f"beta@{x:g}"] = float(np.max(np.abs(self.jump(v + h, x) - self.jump(v - h, x)) / (2 * h)))
        ok = ok_beta and (lipschitz is None or all(s <= lipschitz for s in slopes.values()))
        return {"ok": ok, "beta_bound_ok": ok_beta, "max_slopes": slopes}


@dataclass
class DiscreteSolution:
    """Y, Z, U on a time grid, over lattice states or sampled paths.

    ``Y`` has one row per grid node. ``Z`` and ``U`` have one row per node for
    lattice solutions and one per interval (left endpoint) for path solutions.
    """

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    marks: np.ndarray
    kind: str
    states: Optional[np.ndarray] = None
    bundle: Optional[PathBundle] = None
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True

    def __post_init__(self):
        if self.kind not in ("lattice", "paths"):
            raise ConfigurationError(f"unknown solution kind {self.kind!r}")
        for name in ("Y", "Z", "U"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"solution component {name} has non-finite entries")

    @property
    def n_points(self) -> int:
        return self.Y.shape[1]

    @property
    def z_times(self) -> np.ndarray:
        return self.grid.nodes[: self.Z.shape[0]]

    def same_discretization(self, other: "DiscreteSolution") -> bool:
        if self.kind != other.kind or self.grid != other.grid or self.Y.shape != other.Y.shape:
            return False
        if self.kind == "lattice":
            return bool(np.array_equal(self.states, other.states))
        a, b = self.bundle, other.bundle
        return a is b or (
            a is not None and b is not None and a.seed == b.seed and a.n_paths == b.n_paths
            and np.array_equal(a.values, b.values)
        )

    def value_at(self, t_index: int, v):
        """Lattice value function ``u(t_i, v)`` by linear interpolation."""
        if self.kind != "lattice":
            raise ConfigurationError("value_at needs a lattice solution")
        return np.interp(v, self.states, self.Y[t_index])
