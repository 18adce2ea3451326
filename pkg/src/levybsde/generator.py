"""Structured generators, the bound certificate and the smooth truncation.

A generator is ``f(x, t, y, z, w)`` where ``w = G(t, U) = sum_j g(t, U_j) kappa(x_j) lambda_j``
aggregates the jump component over the atoms. All callables are vectorized:

* ``x`` is a 2-D array ``(n, k)`` holding the state history up to ``t``
  (path values for bundles, a single column for lattice states);
* ``y``, ``z``, ``w`` have shape ``(n,)``; ``U`` has shape ``(n, J)``.

Coefficient functions ``a``, ``b``, ``k_f``, ``rho`` and ``p`` are scalar.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import ConfigurationError, DomainError
from .levy import LevyTriplet, atom_arrays, kappa, l2_nu_norm

logger = logging.getLogger(__name__)

QUAD_RTOL = 1e-8
FD_REL_STEP = 1e-6
COMPARISON_FLOOR = -1e-9


def smooth_clamp(x, M):
    """C^1 monotone clamp ``b_M``: identity on ``|x| <= M-1``, ``+-M`` beyond ``M+1``.

    On the transition band the Hermite cubic with end slopes 1 and 0 reduces to
    the parabola ``M - ((M + 1 - |x|)/2)^2`` (odd extension for negative x).
    """
    if not M >= 1:
        raise DomainError(f"smooth_clamp needs M >= 1, got {M}")
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    band = M - 0.25 * (M + 1.0 - ax) ** 2
    out = np.where(ax <= M - 1.0, ax, np.where(ax >= M + 1.0, M, band))
    out = np.copysign(out, x)
    return out if out.ndim else float(out)


def smooth_clamp_deriv(x, M):
    """Derivative of ``smooth_clamp`` in x; takes values in [0, 1]."""
    if not M >= 1:
        raise DomainError(f"smooth_clamp needs M >= 1, got {M}")
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    band = 0.5 * (M + 1.0 - ax)
    out = np.where(ax <= M - 1.0, 1.0, np.where(ax >= M + 1.0, 0.0, band))
    return out if out.ndim else float(out)


def _fd_step(v):
    return FD_REL_STEP * (1.0 + np.abs(v))


def _as_col(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    return x


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver ``f`` with its aggregation ``g`` and the coefficient functions of its bounds.

    ``truncation`` is ``None`` for the raw generator or ``(R, Q, P)`` for the
    smooth-clamped one produced by ``truncate_generator``.
    """

    f: Callable
    g: Callable = lambda t, u: np.asarray(u, dtype=float)
    dg: Optional[Callable] = None
    a: Callable[[float], float] = lambda t: 0.0
    b: Callable[[float], float] = lambda t: 0.0
    k_f: Callable[[float], float] = lambda t: 0.0
    rho: Callable[[float], float] = lambda r: 1.0
    p: Callable[[float, float], float] = lambda t, x: 0.0
    df_y: Optional[Callable] = None
    df_z: Optional[Callable] = None
    df_u: Optional[Callable] = None
    d_malliavin_f: Optional[Callable] = None
    truncation: Optional[tuple] = None
    name: str = "custom"

    # -- aggregation -----------------------------------------------------
    def g_deriv(self, t, u):
        u = np.asarray(u, dtype=float)
        if self.dg is not None:
            return np.asarray(self.dg(t, u), dtype=float) * np.ones_like(u)
        h = _fd_step(u)
        return (np.asarray(self.g(t, u + h)) - np.asarray(self.g(t, u - h))) / (2 * h)

    def aggregate(self, t, U, marks, intensities):
        """``sum_j g(t, U_j) kappa(x_j) lambda_j`` along the last axis of ``U``."""
        U = np.asarray(U, dtype=float)
        if marks.size == 0:
            return np.zeros(U.shape[:-1]) if U.ndim else 0.0
        w = kappa(marks) * intensities
        return np.asarray(self.g(t, U), dtype=float) @ w

    # -- evaluation ------------------------------------------------------
    def _clamped_args(self, t, y, z, U, marks, intensities):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        U = np.asarray(U, dtype=float)
        if self.truncation is None:
            return y, z, U, self.aggregate(t, U, marks, intensities)
        R, Q, P = self.truncation
        Uc = smooth_clamp(U, 2 * R) if U.size else U
        w_raw = self.aggregate(t, Uc, marks, intensities)
        return smooth_clamp(y, R), smooth_clamp(z, Q), Uc, smooth_clamp(w_raw, P)

    def evaluate(self, x, t, y, z, U, marks, intensities):
        """Driver value for states ``x``, scalars ``y, z`` and atom values ``U``."""
        yc, zc, _, w = self._clamped_args(t, y, z, U, marks, intensities)
        return np.asarray(self.f(_as_col(x), t, yc, zc, w), dtype=float) * np.ones_like(yc)

    def evaluate_w(self, x, t, y, z, w):
        """Driver value given the aggregate directly (no truncation applied)."""
        return np.asarray(self.f(_as_col(x), t, y, z, w), dtype=float) * np.ones_like(np.asarray(y, float))

    def _partial(self, which, x, t, y, z, w):
        fn = {"y": self.df_y, "z": self.df_z, "u": self.df_u}[which]
        shape = np.broadcast(np.asarray(y), np.asarray(z), np.asarray(w)).shape
        if fn is not None:
            return np.broadcast_to(np.asarray(fn(x, t, y, z, w), dtype=float), shape)
        args = {"y": y, "z": z, "u": w}
        v = np.asarray(args[which], dtype=float)
        h = _fd_step(v)

        def shifted(delta):
            yy, zz, ww = y, z, w
            if which == "y":
                yy = v + delta
            elif which == "z":
                zz = v + delta
            else:
                ww = v + delta
            return np.asarray(self.f(x, t, yy, zz, ww), dtype=float)

        return np.broadcast_to((shifted(h) - shifted(-h)) / (2 * h), shape)

    def linearize(self, x, t, y, z, U, marks, intensities):
        """Partial derivatives ``(f_y, f_z, f_U)`` including the clamp chain rule.

        ``f_U`` has shape ``(n, J)``: the derivative of ``f`` with respect to each
        atom value ``U_j``.
        """
        x = _as_col(x)
        yc, zc, Uc, w = self._clamped_args(t, y, z, U, marks, intensities)
        fy = self._partial("y", x, t, yc, zc, w)
        fz = self._partial("z", x, t, yc, zc, w)
        fw = self._partial("u", x, t, yc, zc, w)
        U = np.asarray(U, dtype=float)
        weights = kappa(marks) * intensities
        fU = fw[..., None] * self.g_deriv(t, Uc) * weights
        if self.truncation is not None:
            R, Q, P = self.truncation
            fy = fy * smooth_clamp_deriv(y, R)
            fz = fz * smooth_clamp_deriv(z, Q)
            w_raw = self.aggregate(t, Uc, marks, intensities)
            fU = fU * smooth_clamp_deriv(w_raw, P)[..., None]
            if U.size:
                fU = fU * smooth_clamp_deriv(U, 2 * R)
        return np.array(fy, dtype=float), np.array(fz, dtype=float), np.array(fU, dtype=float)

    def lipschitz_constants(self, t, atoms=()):
        """``(L_y, L_zu)``; for a truncated spec these are the global constants."""
        if self.truncation is None:
            return float(self.a(t)), math.inf
        R, Q, P = self.truncation
        marks, lam = atom_arrays(atoms)
        kn = l2_nu_norm(kappa(marks), lam)
        return float(self.a(t)), float(self.rho(max(Q, P)) * (1 + self.rho(2 * R) * kn) * self.b(t))


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal condition ``xi`` with its sup bound and shift-difference bound.

    ``xi`` maps path values ``(n, nodes)`` to ``(n,)``. ``state_fn`` is the
    Markov form ``v -> xi`` used by lattice solvers. ``d0_xi(values, grid, r)``
    supplies the Brownian-direction derivative where it is known.
    """

    xi: Callable
    A_xi: float
    A_Dxi: Callable[[float], float] = lambda x: 0.0
    state_fn: Optional[Callable] = None
    d0_xi: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        if not (self.A_xi >= 0):
            raise ConfigurationError(f"terminal.A_xi must be >= 0, got {self.A_xi}")

    def evaluate(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return float(np.asarray(self.xi(values[None, :]))[0])
        return np.asarray(self.xi(values), dtype=float) * np.ones(values.shape[0])


@dataclass(frozen=True)
class BoundCertificate:
    R: float
    Q: float
    P: float
    T: float
    y_envelope: Callable[[float], float]
    z_envelope: Callable[[float], float]
    u_envelope: Callable[[float, float], float]

    def as_dict(self):
        return {"R": self.R, "Q": self.Q, "P": self.P, "T": self.T}


def eval_G(spec: GeneratorSpec, t: float, U, atoms) -> float:
    """``sum_j g(t, U(x_j)) kappa(x_j) lambda_j`` for ``U`` a function or per-atom values."""
    marks, lam = atom_arrays(atoms)
    if callable(U):
        vals = np.array([float(U(m)) for m in marks])
    else:
        vals = np.asarray(U, dtype=float).reshape(-1)
        if vals.size != marks.size:
            raise ConfigurationError(f"U has {vals.size} values for {marks.size} atoms")
    if marks.size == 0:
        return 0.0
    return float(spec.aggregate(t, vals, marks, lam))


def _quad(fn, lo, hi, what, rtol=QUAD_RTOL):
    if hi <= lo:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(lambda s: float(fn(s)), lo, hi, epsrel=rtol, epsabs=0.0, limit=200)
        except integrate.IntegrationWarning as exc:
            raise ConfigurationError(f"{what}: quadrature did not converge ({exc})") from None
    if not math.isfinite(val):
        raise ConfigurationError(f"{what}: integral diverges")
    return val


class _Exponent:
    """``int_s^t a`` with caching of the antiderivative at queried points."""

    def __init__(self, a, rtol=QUAD_RTOL):
        self.a = a
        self.rtol = rtol
        self._cache = {}

    def from0(self, s):
        s = float(s)
        if s not in self._cache:
            self._cache[s] = _quad(self.a, 0.0, s, "integral of a", self.rtol)
        return self._cache[s]

    def __call__(self, s, t):
        return self.from0(t) - self.from0(s)


def envelope_integral(A, rate, a, t, T, rtol=QUAD_RTOL, what="envelope"):
    """``A exp(int_t^T a) + int_t^T rate(s) exp(int_t^s a) ds``."""
    ex = _Exponent(a, rtol)
    head = A * math.exp(ex(t, T)) if A else 0.0
    tail = _quad(lambda s: rate(s) * math.exp(ex(t, s)), t, T, what, rtol)
    return head + tail


def compute_bounds(spec: GeneratorSpec, terminal: TerminalSpec, atoms, T: float) -> BoundCertificate:
    """Constants ``R, Q, P`` and the time-dependent envelopes for ``Y, Z, U``."""
    if not (T > 0):
        raise ConfigurationError("T must be > 0")
    A_xi = float(terminal.A_xi)
    if not math.isfinite(A_xi):
        raise ConfigurationError("terminal.A_xi must be finite to certify bounds")
    marks, lam = atom_arrays(atoms)
    a, k_f, p, rho = spec.a, spec.k_f, spec.p, spec.rho

    R = envelope_integral(A_xi, k_f, a, 0.0, T, what="R") + 1.0
    A0 = float(terminal.A_Dxi(0.0))
    Q = envelope_integral(A0, lambda s: p(s, 0.0), a, 0.0, T, what="Q") + 1.0

    if marks.size:
        knorm = l2_nu_norm(kappa(marks), lam)
        adx = l2_nu_norm([terminal.A_Dxi(m) for m in marks], lam)
        pnorm = lambda s: l2_nu_norm([p(s, m) for m in marks], lam)
        inner = envelope_integral(adx, pnorm, a, 0.0, T, what="P")
        P = float(rho(2 * R)) * knorm * inner + 1.0
    else:
        P = 1.0
    for name, val in (("R", R), ("Q", Q), ("P", P)):
        if not math.isfinite(val):
            raise ConfigurationError(f"bound constant {name} is not finite")

    def y_env(t):
        return envelope_integral(A_xi, k_f, a, float(t), T, what="y envelope")

    def z_env(t):
        return envelope_integral(A0, lambda s: p(s, 0.0), a, float(t), T, what="z envelope")

    def u_env(t, x):
        raw = envelope_integral(float(terminal.A_Dxi(x)), lambda s: p(s, x), a, float(t), T, what="u envelope")
        return min(raw, 2 * R - 2)

    logger.info("bound certificate R=%.6g Q=%.6g P=%.6g", R, Q, P)
    return BoundCertificate(R, Q, P, float(T), y_env, z_env, u_env)


def truncate_generator(spec: GeneratorSpec, cert: BoundCertificate, atoms=None) -> GeneratorSpec:
    """Clamp the arguments: ``f(b_R(y), b_Q(z), b_P(G(t, b_2R(U))))``.

    Atoms are passed at evaluation time; the argument is accepted for symmetry.
    """
    return dataclasses.replace(spec, truncation=(cert.R, cert.Q, cert.P), name=spec.name + "^")


@dataclass
class ComparisonReport:
    ok: bool
    worst_violation: float
    witness: tuple
    n_samples: int

    def as_dict(self):
        return {"check": "comparison_condition", "ok": self.ok, "worst": self.worst_violation,
                "location": list(self.witness)}


def check_comparison_condition(spec: GeneratorSpec, sample_box: dict, n_lattice: int = 5,
                               n_random: int = 2000, seed: int = 0, x_box=(-1.0, 1.0)) -> ComparisonReport:
    """Sample ``f_u(x,t,y,z,u) * g_u(t,u') + 1`` over a box; ok iff the min is ``>= -1e-9``.

    ``sample_box`` maps ``t, y, z, u, u_prime`` to ``(lo, hi)`` ranges.
    ``worst_violation`` is the minimum of ``f_u g_u + 1`` over the sample.
    """
    keys = ("t", "y", "z", "u", "u_prime")
    missing = [k for k in keys if k not in sample_box]
    if missing:
        raise ConfigurationError(f"sample_box missing ranges for {missing}")
    axes = [np.linspace(*map(float, sample_box[k]), n_lattice) for k in keys]
    mesh = np.meshgrid(*axes, indexing="ij")
    lattice = np.stack([m.ravel() for m in mesh], axis=1)
    rng = np.random.default_rng(seed)
    lo = np.array([sample_box[k][0] for k in keys], dtype=float)
    hi = np.array([sample_box[k][1] for k in keys], dtype=float)
    rand = lo + (hi - lo) * rng.random((n_random, len(keys)))
    pts = np.vstack([lattice, rand])
    xs = np.linspace(*x_box, 3)

    worst = math.inf
    witness = ()
    for t in np.unique(pts[:, 0]):
        sel = pts[pts[:, 0] == t]
        y, z, u, up = sel[:, 1], sel[:, 2], sel[:, 3], sel[:, 4]
        for xv in xs:
            x = np.full((y.size, 1), xv)
            fu = spec._partial("u", x, float(t), y, z, u)
            gu = spec.g_deriv(float(t), up)
            val = fu * gu + 1.0
            i = int(np.argmin(val))
            if val[i] < worst:
                worst = float(val[i])
                witness = (float(t), float(y[i]), float(z[i]), float(u[i]), float(up[i]), float(xv))
    return ComparisonReport(worst >= COMPARISON_FLOOR, worst, witness, pts.shape[0] * xs.size)


@dataclass
class AuditReport:
    ok: bool
    failures: list

    def as_dict(self):
        return {"check": "audit", "ok": self.ok, "failures": self.failures}


def audit_generator(spec: GeneratorSpec, atoms=(), T=1.0, box=3.0, n=400, seed=0) -> AuditReport:
    """Sampled checks of ``g(t,0)=0``, the g-slope bound, ``|f(0)| <= k_f`` and the local Lipschitz bound."""
    rng = np.random.default_rng(seed)
    marks, lam = atom_arrays(atoms)
    fails = []
    ts = np.linspace(0.0, T, 11)
    for t in ts:
        if abs(float(np.asarray(spec.g(t, np.zeros(1)))[0])) > 1e-12:
            fails.append(("g(t,0)=0", float(t)))
            break
    u1 = rng.uniform(-box, box, n)
    u2 = rng.uniform(-box, box, n)
    t = rng.uniform(0, T, n)
    for i in range(n):
        gu = np.asarray(spec.g(t[i], np.array([u1[i], u2[i]])), dtype=float)
        lhs = abs(gu[0] - gu[1])
        rhs = spec.rho(max(abs(u1[i]), abs(u2[i]))) * abs(u1[i] - u2[i])
        if lhs > rhs * (1 + 1e-9) + 1e-12:
            fails.append(("g rho-Lipschitz", float(t[i]), float(u1[i]), float(u2[i])))
            break
    x = rng.uniform(-box, box, (n, 1))
    zero = np.zeros(n)
    for i, ti in enumerate(t):
        f0 = abs(float(spec.f(x[i:i + 1], ti, zero[:1], zero[:1], zero[:1])[0]))
        if f0 > spec.k_f(ti) + 1e-12:
            fails.append(("|f(0)| <= k_f", float(ti), float(x[i, 0])))
            break
    y1, y2 = rng.uniform(-box, box, (2, n))
    z1, z2 = rng.uniform(-box, box, (2, n))
    w1, w2 = rng.uniform(-box, box, (2, n))
    for i, ti in enumerate(t):
        xi = x[i:i + 1]
        d = abs(float(spec.f(xi, ti, y1[i:i+1], z1[i:i+1], w1[i:i+1])[0]
                      - spec.f(xi, ti, y2[i:i+1], z2[i:i+1], w2[i:i+1])[0]))
        r = max(abs(z1[i]), abs(z2[i]), abs(w1[i]), abs(w2[i]))
        bound = spec.a(ti) * abs(y1[i] - y2[i]) + spec.rho(r) * spec.b(ti) * (abs(z1[i] - z2[i]) + abs(w1[i] - w2[i]))
        if d > bound * (1 + 1e-9) + 1e-12:
            fails.append(("local Lipschitz", float(ti), float(y1[i]), float(z1[i]), float(w1[i])))
            break
    return AuditReport(not fails, fails)


def audit_terminal(terminal: TerminalSpec, bundle, n_shifts=20, seed=0) -> AuditReport:
    """Sampled checks of ``|xi| <= A_xi`` and ``|xi(X + v 1[r,T]) - xi(X)| <= A_Dxi(v)``."""
    from .levy import shift_values

    rng = np.random.default_rng(seed)
    fails = []
    vals = terminal.evaluate(bundle.values)
    worst = float(np.max(np.abs(vals)))
    if worst > terminal.A_xi + 1e-12:
        fails.append(("|xi| <= A_xi", worst))
    marks = bundle.model.marks
    candidates = marks if marks.size else np.array([0.5, -0.5])
    for _ in range(n_shifts):
        r = float(rng.uniform(0, bundle.grid.T))
        v = float(rng.choice(candidates))
        shifted = terminal.evaluate(shift_values(bundle.values, bundle.grid, r, v))
        d = float(np.max(np.abs(shifted - vals)))
        if d > terminal.A_Dxi(v) + 1e-12:
            fails.append(("|D xi| <= A_Dxi", r, v, d))
            break
    return AuditReport(not fails, fails)


def model_atoms(model_or_atoms):
    if isinstance(model_or_atoms, LevyTriplet):
        return model_or_atoms.atoms
    return tuple(model_or_atoms)
