"""Built-in generator and terminal-condition families, selectable by name."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError
from .generator import GeneratorSpec, TerminalSpec


def _const(c):
    return lambda *args: c


def _full(y, c):
    return np.full(np.shape(y), float(c))


def zero_generator() -> GeneratorSpec:
    return GeneratorSpec(
        f=lambda x, t, y, z, w: np.zeros(np.shape(y)),
        df_y=lambda x, t, y, z, w: 0.0,
        df_z=lambda x, t, y, z, w: 0.0,
        df_u=lambda x, t, y, z, w: 0.0,
        name="zero",
    )


def constant_generator(c: float) -> GeneratorSpec:
    c = float(c)
    return GeneratorSpec(
        f=lambda x, t, y, z, w: _full(y, c),
        k_f=_const(abs(c)),
        df_y=lambda x, t, y, z, w: 0.0,
        df_z=lambda x, t, y, z, w: 0.0,
        df_u=lambda x, t, y, z, w: 0.0,
        name=f"constant({c})",
    )


def linear_generator(alpha=0.0, beta=0.0, gamma=0.0, delta=0.0) -> GeneratorSpec:
    """``f = alpha y + beta z + gamma w + delta`` with constant coefficients."""
    al, be, ga, de = map(float, (alpha, beta, gamma, delta))
    rho_c = max(abs(be), abs(ga), 1.0)
    return GeneratorSpec(
        f=lambda x, t, y, z, w: al * np.asarray(y) + be * np.asarray(z) + ga * np.asarray(w) + de,
        a=_const(abs(al)),
        b=_const(1.0),
        k_f=_const(abs(de)),
        rho=_const(rho_c),
        df_y=lambda x, t, y, z, w: al,
        df_z=lambda x, t, y, z, w: be,
        df_u=lambda x, t, y, z, w: ga,
        name=f"linear({al},{be},{ga},{de})",
    )


def envelope_generator(k=0.0, a=1.0) -> GeneratorSpec:
    """``f = k + a |y|``: the driver of the sandwich envelope."""
    k, a = float(k), float(a)
    if a < 0:
        raise ConfigurationError("generator.params.a must be >= 0")
    return GeneratorSpec(
        f=lambda x, t, y, z, w: k + a * np.abs(y),
        a=_const(a),
        b=_const(0.0),
        k_f=_const(abs(k)),
        df_y=lambda x, t, y, z, w: a * np.sign(y),
        df_z=lambda x, t, y, z, w: 0.0,
        df_u=lambda x, t, y, z, w: 0.0,
        name=f"envelope({k},{a})",
    )


def subquadratic_generator(c=0.5, gamma=0.0) -> GeneratorSpec:
    """``f = c z tanh(z) + gamma w``; locally Lipschitz in z with modulus linear in |z|."""
    c, ga = float(c), float(gamma)
    rho_scale = max(2 * abs(c), 1.0, abs(ga))
    return GeneratorSpec(
        f=lambda x, t, y, z, w: c * np.asarray(z) * np.tanh(z) + ga * np.asarray(w),
        a=_const(0.0),
        b=_const(1.0),
        rho=lambda r: rho_scale * (1.0 + r),
        df_y=lambda x, t, y, z, w: 0.0,
        df_z=lambda x, t, y, z, w: c * (np.tanh(z) + np.asarray(z) / np.cosh(z) ** 2),
        df_u=lambda x, t, y, z, w: ga,
        name=f"subquadratic({c},{ga})",
    )


GENERATOR_FAMILIES = {
    "zero": zero_generator,
    "constant": constant_generator,
    "linear": linear_generator,
    "envelope": envelope_generator,
    "subquadratic": subquadratic_generator,
}


def make_generator(family: str, params: dict | None = None) -> GeneratorSpec:
    params = dict(params or {})
    try:
        factory = GENERATOR_FAMILIES[family]
    except KeyError:
        raise ConfigurationError(f"generator.family: unknown family {family!r}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"generator.params: {exc}") from None


# terminal conditions -----------------------------------------------------

def constant_terminal(c: float) -> TerminalSpec:
    c = float(c)
    return TerminalSpec(
        xi=lambda values: np.full(np.shape(values)[0], c),
        A_xi=abs(c),
        A_Dxi=_const(0.0),
        state_fn=lambda v: np.full(np.shape(v), c),
        d0_xi=lambda values, grid, r, model: np.zeros(np.shape(values)[0]),
        name=f"constant({c})",
    )


def identity_terminal() -> TerminalSpec:
    """``xi = X_T`` (unbounded, so no bound certificate exists)."""
    return TerminalSpec(
        xi=lambda values: np.asarray(values)[:, -1],
        A_xi=math.inf,
        A_Dxi=lambda x: abs(x),
        state_fn=lambda v: np.asarray(v, dtype=float),
        d0_xi=lambda values, grid, r, model: np.full(np.shape(values)[0], model.sigma),
        name="X_T",
    )


def square_terminal() -> TerminalSpec:
    return TerminalSpec(
        xi=lambda values: np.asarray(values)[:, -1] ** 2,
        A_xi=math.inf,
        A_Dxi=_const(math.inf),
        state_fn=lambda v: np.asarray(v, dtype=float) ** 2,
        d0_xi=lambda values, grid, r, model: 2 * model.sigma * np.asarray(values)[:, -1],
        name="X_T^2",
    )


def tanh_terminal(scale=1.0, sigma=1.0) -> TerminalSpec:
    """``xi = tanh(scale X_T)``; ``sigma`` is the diffusion level entering ``A_Dxi(0)``."""
    s, sg = float(scale), float(sigma)
    return TerminalSpec(
        xi=lambda values: np.tanh(s * np.asarray(values)[:, -1]),
        A_xi=1.0,
        A_Dxi=lambda x: sg * abs(s) if x == 0 else 2 * math.tanh(abs(s * x) / 2),
        state_fn=lambda v: np.tanh(s * np.asarray(v, dtype=float)),
        d0_xi=lambda values, grid, r, model: model.sigma * s / np.cosh(s * np.asarray(values)[:, -1]) ** 2,
        name=f"tanh({s})",
    )


def tanh_average_terminal(scale=1.0, sigma=1.0) -> TerminalSpec:
    """Path-dependent ``xi = tanh(scale * mean_k X_{t_k})`` over the grid nodes."""
    s, sg = float(scale), float(sigma)

    def d0(values, grid, r, model):
        values = np.asarray(values)
        frac = np.mean(grid.nodes >= grid.nodes[grid.first_index_at_or_after(r)])
        m = values.mean(axis=1)
        return model.sigma * s * frac / np.cosh(s * m) ** 2

    return TerminalSpec(
        xi=lambda values: np.tanh(s * np.asarray(values).mean(axis=1)),
        A_xi=1.0,
        A_Dxi=lambda x: sg * abs(s) if x == 0 else 2 * math.tanh(abs(s * x) / 2),
        d0_xi=d0,
        name=f"tanh_average({s})",
    )


TERMINAL_FAMILIES = {
    "constant": constant_terminal,
    "identity": identity_terminal,
    "square": square_terminal,
    "tanh": tanh_terminal,
    "tanh_average": tanh_average_terminal,
}


def make_terminal(family: str, params: dict | None = None) -> TerminalSpec:
    params = dict(params or {})
    try:
        factory = TERMINAL_FAMILIES[family]
    except KeyError:
        raise ConfigurationError(f"terminal.family: unknown family {family!r}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"terminal.params: {exc}") from None
