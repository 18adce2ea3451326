import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levybsde.errors import ConfigurationError, DomainError
from levybsde.families import linear_generator, tanh_terminal
from levybsde.generator import compute_bounds, truncate_generator
from levybsde.hgen import (H_alpha, HGeneratorSpec, audit_hspec, build_cutoff_generator, dH_alpha,
                           exponential_utility_hspec, pair_norms, solve_H_limit)
from levybsde.levy import LevyTriplet, TimeGrid, atom_arrays, kappa_n
from levybsde.solver import ForwardSpec, solve_markov_dp

LATTICE = np.linspace(-5, 5, 101)
GRID = TimeGrid.uniform(1.0, 40)
DP = {"lattice": LATTICE, "time_grid": GRID}
BASE = linear_generator(0.2, 0.1, 0.1)


def test_H_values():
    assert H_alpha(0.0, 1.0) == 0.0
    assert H_alpha(1.0, 1.0) == pytest.approx(math.e - 2, rel=1e-14)
    assert H_alpha(1.0, 1.0) == pytest.approx(0.718281828, abs=1e-9)
    for a in (0.1, 1.0, 7.0):
        assert dH_alpha(0.0, a) == 0.0


def test_H_small_argument_continuity():
    u = np.array([0.99e-4, 1.01e-4])
    assert np.allclose(H_alpha(u, 1.0), np.expm1(u) - u, rtol=1e-10)
    with pytest.raises(DomainError):
        H_alpha(1.0, 0.0)


@settings(max_examples=300, deadline=None)
@given(st.floats(-6, 6), st.floats(0.01, 5))
def test_dH_above_minus_one(u, a):
    # alpha * u >= -30 keeps exp(alpha u) representable above rounding to -1
    assert dH_alpha(u, a) > -1


def _eval(gen, U, atoms, w_only=False):
    marks, lam = atom_arrays(atoms)
    x = np.zeros((U.shape[0], 1))
    y = np.full(U.shape[0], 0.3)
    z = np.full(U.shape[0], -0.2)
    return gen.evaluate(x, 0.5, y, z, U, marks, lam)


def test_cutoff_zero_U():
    atoms = [(0.25, 1.0), (2.0, 0.5)]
    h = exponential_utility_hspec(BASE, 1.0)
    gen = build_cutoff_generator(h, 3, atoms)
    U = np.zeros((1, 2))
    expected = 0.2 * 0.3 + 0.1 * -0.2  # fbar at zero aggregate, plus phi(., 0)
    assert _eval(gen, U, atoms)[0] == pytest.approx(expected)


def test_cutoff_large_atoms_saturate():
    atoms = [(1.0, 1.0), (-2.5, 0.5)]
    h = exponential_utility_hspec(BASE, 1.0)
    U = np.array([[0.4, -0.7]])
    vals = [_eval(build_cutoff_generator(h, n, atoms), U, atoms)[0] for n in (1, 2, 10, 1000)]
    assert len(set(vals)) == 1


def test_cutoff_half_weight():
    atoms = [(0.25, 1.0)]
    h = exponential_utility_hspec(linear_generator(), 1.0)
    U = np.array([[0.8]])
    limit_term = H_alpha(0.8, 1.0) * 1.0
    assert kappa_n(0.25, 2) == 0.5
    assert _eval(build_cutoff_generator(h, 2, atoms), U, atoms)[0] == pytest.approx(0.5 * limit_term)
    assert _eval(build_cutoff_generator(h, 4, atoms), U, atoms)[0] == pytest.approx(limit_term)


def test_cutoff_rejects_bad_n():
    with pytest.raises(DomainError):
        build_cutoff_generator(exponential_utility_hspec(BASE), 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=3, max_size=3), st.integers(1, 200))
def test_monotone_cutoff_aggregate(u, n):
    atoms = [(0.05, 2.0), (0.3, 1.0), (-0.7, 0.5)]
    marks, lam = atom_arrays(atoms)
    h = exponential_utility_hspec(BASE, 1.0)
    U = np.array([u])
    a = build_cutoff_generator(h, n, atoms).h_aggregate(U, marks, lam)
    b = build_cutoff_generator(h, n + 1, atoms).h_aggregate(U, marks, lam)
    assert b[0] >= a[0]


def test_certificate_independent_of_n():
    atoms = [(0.1, 5.0), (0.25, 2.0)]
    h = exponential_utility_hspec(BASE, 1.0)
    term = tanh_terminal(1.0, 1.0)
    ref = compute_bounds(BASE, term, atoms, 1.0)
    for n in (1, 4, 64):
        c = compute_bounds(build_cutoff_generator(h, n, atoms), term, atoms, 1.0)
        assert (c.R, c.Q, c.P) == (ref.R, ref.Q, ref.P)


def test_audit_exponential_utility():
    assert audit_hspec(exponential_utility_hspec(BASE, 1.0)).ok
    bad = HGeneratorSpec(BASE, H=lambda u: np.asarray(u) ** 2 + 1.0, dH=lambda u: 2 * np.asarray(u),
                         phi=lambda v, w: v + w, dphi_v=lambda v, w: np.ones_like(v),
                         dphi_w=lambda v, w: np.ones_like(v), c_of=lambda R: 2.0)
    rep = audit_hspec(bad)
    assert not rep.ok and not rep.conditions["H(0)=0"]


def test_limit_large_atoms_first_pair_zero():
    model = LevyTriplet(0.0, 1.0, ((1.0, 1.0),))
    res = solve_H_limit(exponential_utility_hspec(BASE), tanh_terminal(1.0, 1.0), model, settings=DP,
                        n_schedule=[1, 2, 4])
    assert res.converged and res.n_final == 2 and len(res.table) == 1
    row = res.table[0]
    assert row["dY"] == row["dZ"] == row["dU"] == 0.0


def test_limit_zero_H_equals_base():
    model = LevyTriplet(0.0, 1.0, ((0.2, 2.0),))
    zeroH = HGeneratorSpec(BASE, H=lambda u: 0.0 * np.asarray(u), dH=lambda u: 0.0 * np.asarray(u),
                           phi=lambda v, w: np.asarray(v) + np.asarray(w),
                           dphi_v=lambda v, w: np.ones(np.shape(v)), dphi_w=lambda v, w: np.ones(np.shape(v)),
                           c_of=lambda R: 0.0)
    term = tanh_terminal(1.0, 1.0)
    res = solve_H_limit(zeroH, term, model, settings=DP, n_schedule=[1, 2])
    cert = compute_bounds(BASE, term, model.atoms, 1.0)
    direct = solve_markov_dp(ForwardSpec.from_levy(model), truncate_generator(BASE, cert), term.state_fn, model.atoms,
                             LATTICE, GRID)
    assert np.allclose(res.solution.Y, direct.Y, atol=1e-12)


def test_limit_table_decreasing_and_bounded():
    from levybsde.verify import check_bounds

    model = LevyTriplet(0.0, 1.0, ((0.1, 5.0), (0.25, 2.0)))
    res = solve_H_limit(exponential_utility_hspec(BASE, 1.0), tanh_terminal(1.0, 1.0), model, settings=DP,
                        n_schedule=[1, 4, 16, 64, 256], cauchy_tol=1e-4)
    sums = [r["dY"] + r["dZ"] + r["dU"] for r in res.table]
    assert res.converged
    assert all(b < a for a, b in zip(sums, sums[1:]))
    assert check_bounds(res.solution, res.certificate).ok
    assert res.table_csv().splitlines()[0] == "n,m,dY,dZ,dU"


def test_limit_schedule_validation():
    model = LevyTriplet(0.0, 1.0, ((0.1, 5.0),))
    with pytest.raises(ConfigurationError):
        solve_H_limit(exponential_utility_hspec(BASE), tanh_terminal(), model, settings=DP, n_schedule=[4, 2])


def test_pair_norms_identical_zero():
    model = LevyTriplet(0.0, 1.0, ((0.5, 1.0),))
    s = solve_markov_dp(ForwardSpec.from_levy(model), BASE, np.tanh, model.atoms, LATTICE, GRID)
    assert pair_norms(s, s, model.intensities) == (0.0, 0.0, 0.0)
