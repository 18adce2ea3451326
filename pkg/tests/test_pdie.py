import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levybsde.errors import ConfigurationError, StabilityError
from levybsde.families import constant_generator, linear_generator, zero_generator
from levybsde.levy import LevyTriplet, TimeGrid, kappa
from levybsde.pdie import (PdieGrid, apply_A, apply_B, apply_K, check_forward_conditions, cross_validate,
                           second_derivative, solve_pdie)
from levybsde.solver import ForwardSpec, solve_markov_dp

V = np.linspace(-5, 5, 101)


def fwd(b=0.0, s=1.0, beta=None):
    beta = beta or (lambda v, x: 0.0 * v)
    return ForwardSpec(lambda v: b + 0.0 * v, lambda v: s + 0.0 * v, beta)


SHIFT = lambda v, x: 0.0 * v + x


# generator of the forward

def test_A_linear_vanishes():
    assert np.allclose(apply_A(V.copy(), fwd(), V), 0, atol=1e-12)


def test_A_square_is_one():
    assert np.allclose(apply_A(V**2, fwd(), V), 1.0, rtol=0, atol=1e-10)


def test_A_drift_on_linear():
    assert np.allclose(apply_A(V.copy(), fwd(b=2.0), V), 2.0, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_second_difference_exact_on_quadratics(a, b, c):
    v = np.sort(np.concatenate([V[::7], [0.123, 2.71]]))
    assert np.allclose(second_derivative(a * v**2 + b * v + c, v), 2 * a, atol=1e-8)


# jump operators

def test_K_linear_vanishes():
    atoms = [(0.5, 1.0), (-1.0, 2.0)]
    inner = np.abs(V) <= 3
    assert np.allclose(apply_K(V.copy(), fwd(beta=SHIFT), atoms, V)[inner], 0, atol=1e-12)


def test_K_zero_jump():
    assert not np.any(apply_K(np.sin(V), fwd(), [(1.0, 1.0)], V))


def test_K_quadratic():
    inner = np.abs(V) <= 3.5
    out = apply_K(V**2, fwd(beta=SHIFT), [(1.0, 1.0)], V)
    # (v + 1)^2 - v^2 - 2v = 1; cubic interpolation of a quadratic is exact only to O(h^3)
    assert np.allclose(out[inner], 1.0, atol=1e-3)


def test_K_quadratic_several_atoms():
    atoms = [(0.3, 2.0), (-0.8, 1.0)]
    inner = np.abs(V) <= 3.5
    closed = sum(lam * x * x for x, lam in atoms)
    assert np.allclose(apply_K(V**2, fwd(beta=SHIFT), atoms, V)[inner], closed, atol=1e-3)


def test_B_examples():
    assert not np.any(apply_B(np.full(V.size, 3.0), fwd(beta=SHIFT), [(2.0, 3.0)], V))
    inner = np.abs(V) <= 2.5
    assert np.allclose(apply_B(V.copy(), fwd(beta=SHIFT), [(2.0, 3.0)], V)[inner], 2 * kappa(2.0) * 3)
    assert np.allclose(apply_B(V.copy(), fwd(beta=SHIFT), [(0.5, 1.0)], V)[inner], 0.25)


# solver

def _pg(n_steps=200, T=1.0, v=V):
    return PdieGrid(v, TimeGrid.uniform(T, n_steps))


def test_linear_terminal_invariant():
    out = solve_pdie(fwd(), zero_generator(), lambda v: v, _pg())
    assert np.allclose(out.values, V[None, :], atol=1e-10)


def test_heat_square_terminal():
    out = solve_pdie(fwd(), zero_generator(), lambda v: v**2, _pg(400))
    t = out.time_grid.nodes[:, None]
    inner = np.abs(V) <= 2
    err = np.abs(out.values - (V**2 + (1 - t)))[:, inner]
    assert err.max() < 5e-3


def test_constant_driver_accumulates():
    out = solve_pdie(fwd(), constant_generator(0.7), lambda v: 0.0 * v, _pg(50, T=2.0))
    assert np.allclose(out.values[0], 1.4, atol=1e-12)


def test_stability_guard():
    with pytest.raises(StabilityError) as ei:
        solve_pdie(fwd(beta=SHIFT), zero_generator(), np.tanh, _pg(2), atoms=[(0.5, 10.0)])
    assert 0 < ei.value.required_dt < 0.5


@settings(max_examples=20, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 1), st.floats(0.1, 2))
def test_discrete_comparison(shift, bump, scale):
    f = linear_generator(0.3, 0.2, 0.1, 0.1)
    atoms = [(0.5, 1.0)]
    g1 = lambda v: np.tanh(scale * v) + shift
    g2 = lambda v: g1(v) + bump * np.exp(-v * v)
    pg = _pg(100, v=np.linspace(-4, 4, 81))
    a = solve_pdie(fwd(beta=SHIFT), f, g1, pg, atoms)
    b = solve_pdie(fwd(beta=SHIFT), f, g2, pg, atoms)
    assert np.all(a.values <= b.values + 1e-12)


# cross validation

def _both(spec, g, model, n_pdie=400, n_dp=100, v=V):
    forward = ForwardSpec.from_levy(model)
    out = solve_pdie(forward, spec, g, PdieGrid(v, TimeGrid.uniform(1.0, n_pdie)), model.atoms)
    sol = solve_markov_dp(forward, spec, g, model.atoms, v, TimeGrid.uniform(1.0, n_dp))
    return out, sol


def test_cross_validate_linear():
    out, sol = _both(zero_generator(), lambda v: v, LevyTriplet(0.0, 1.0, ()))
    rep = cross_validate(out, sol)
    # the lattice solver clips transitions at the edge, worth about E(W - 2.5)^+ at the inner-half boundary
    assert rep.max_error < 5e-3
    inner = np.abs(V) <= 2.5
    assert np.allclose(out.values[0, inner], V[inner], atol=1e-6)


def test_cross_validate_constant_driver():
    out, sol = _both(constant_generator(0.5), lambda v: 0.0 * v, LevyTriplet(0.0, 1.0, ()))
    assert cross_validate(out, sol).max_error < 1e-10
    assert np.allclose(out.values[:, 50], 0.5 * (1 - out.time_grid.nodes), atol=1e-12)


def test_cross_validate_linear_ode():
    a0 = 0.5
    out, sol = _both(linear_generator(alpha=a0), lambda v: 1.0 + 0.0 * v, LevyTriplet(0.0, 1.0, ()))
    t = out.time_grid.nodes
    assert np.allclose(out.values[:, 50], np.exp(a0 * (1 - t)), rtol=1e-3)
    assert cross_validate(out, sol).max_error < 5e-3


def test_refinement_reduces_cross_validation_error():
    model = LevyTriplet(0.0, 1.0, ((0.5, 1.0),))
    spec = linear_generator(-0.5)
    errs = []
    for n_pdie, n_dp, n_v in ((100, 25, 51), (200, 50, 101), (400, 100, 201)):
        v = np.linspace(-5, 5, n_v)
        out, sol = _both(spec, np.tanh, model, n_pdie, n_dp, v)
        errs.append(cross_validate(out, sol).max_error)
    assert errs[0] > errs[1] > errs[2]


def test_cross_validate_mismatches():
    out, sol = _both(zero_generator(), np.tanh, LevyTriplet(0.0, 1.0, ()), 100, 100)
    with pytest.raises(ConfigurationError):
        cross_validate(PdieGrid(V, TimeGrid.uniform(1.0, 30), np.zeros((31, V.size))), sol)
    with pytest.raises(ConfigurationError):
        cross_validate(out, solve_markov_dp(fwd(), zero_generator(), np.tanh, (), np.linspace(-5, 5, 51),
                                            TimeGrid.uniform(1.0, 100)))


def test_csv_shape():
    out = solve_pdie(fwd(), zero_generator(), np.tanh, _pg(4, v=np.linspace(-1, 1, 5)))
    lines = out.to_csv().splitlines()
    assert lines[0] == "t,v,u" and len(lines) == 1 + 5 * 5


# forward conditions

def test_forward_conditions_brownian():
    assert check_forward_conditions(fwd(), (-3, 3), [(0.5, 1.0)]).ok


def test_forward_conditions_degenerate_sigma():
    rep = check_forward_conditions(ForwardSpec(lambda v: 0 * v, lambda v: v, lambda v, x: 0 * v), (-1, 1))
    key = "sigma bounded above and away from 0"
    assert not rep.conditions[key] and abs(rep.witnesses[key]) < 0.02


def test_forward_conditions_negative_jump():
    f = ForwardSpec(lambda v: 0 * v, lambda v: 1 + 0 * v, lambda v, x: 0 * v - kappa(x))
    rep = check_forward_conditions(f, (-1, 1), [(0.5, 1.0)])
    assert not rep.conditions["beta >= 0"] and "beta >= 0" in rep.witnesses
