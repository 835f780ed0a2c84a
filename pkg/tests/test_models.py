"""Fixture sanity: axioms, potentials, derivative evaluators.

The structure constants of each fixture are cross-checked against finite
third differences of its generating potential -- an oracle that never touches
the fixture's own ``eval_C``.
"""

from __future__ import annotations

import numpy as np
import pytest

from froblax.models import box_grid, check_axioms, fixture

RNG = np.random.default_rng(7)


def third_derivative_fd(F, x, a, b, c, h=1e-2):
    """Central finite-difference third derivative d^3 F / dx^a dx^b dx^c."""
    x = np.asarray(x, dtype=float)

    def d1(g, i):
        def dg(y):
            e = np.zeros_like(y)
            e[i] = h
            return (g(y + e) - g(y - e)) / (2 * h)
        return dg

    return d1(d1(d1(F, a), b), c)(x)


def structure_from_potential(model, x):
    """Oracle: C_alpha from eta^{-1} and third derivatives of the potential."""
    n = model.n
    eta_inv = np.linalg.inv(model.eta)
    c3 = np.empty((n, n, n))
    for a in range(n):
        for b in range(n):
            for c in range(n):
                c3[a, b, c] = third_derivative_fd(model.potential, x, a, b, c)
    # (C_a)^g_b = eta^{g d} c_{a b d}
    return np.einsum("gd,abd->agb", eta_inv, c3)


@pytest.mark.parametrize("name", ["trivial_diag(2)", "qh_p1", "a2_poly"])
def test_structure_matches_potential(name):
    model = fixture(name)
    for _ in range(4):
        lo = np.array([b[0] for b in model.domain])
        hi = np.array([b[1] for b in model.domain])
        x = lo + (hi - lo) * RNG.random(model.n)
        want = structure_from_potential(model, x)
        got = model.C(x)
        # nested central differences carry O(h^2) truncation ~ 1e-4 * F^(5)
        assert np.max(np.abs(got - want)) < 5e-3, f"{name} at {x}"


@pytest.mark.parametrize("name", ["trivial_diag(2)", "trivial_diag(3)", "qh_p1", "a2_poly"])
def test_axiom_residuals_exact(name):
    rep = check_axioms(fixture(name))
    for key, val in rep.residuals().items():
        assert val < 1e-12, f"{name}: {key} = {val}"


def test_trivial_axioms_exactly_zero():
    rep = check_axioms(fixture("trivial_diag(2)"))
    assert all(v == 0.0 for v in rep.residuals().values())


def test_qh_p1_gap_bound():
    # eigenvalues of C_2 are +-exp(x2/2): gap 2 exp(x2/2) >= 2 exp(-1/2) on the box
    rep = check_axioms(fixture("qh_p1"), box_grid(((-1, 1), (-1, 1)), 33))
    assert rep.eig_gap_c2 >= 2 * np.exp(-0.5) - 1e-12
    assert rep.eig_gap_pencil > 0.1


def test_a2_caustic_margin_reported_as_zero():
    model = fixture("a2_poly")
    grid = box_grid(((-1, 1), (-0.5, 0.5)), 11)  # contains x2 = 0
    rep = check_axioms(model, grid)
    assert rep.eig_gap_c2 < 1e-12
    assert rep.eig_gap_pencil < 1e-6


def test_analytic_dC_matches_fd():
    for name in ["qh_p1", "a2_poly", "trivial_diag(3)"]:
        model = fixture(name)
        x = model.basepoint + 0.05
        h = 1e-5
        got = model.eval_dC(x)
        for b in range(model.n):
            e = np.zeros(model.n)
            e[b] = h
            fd = (model.C(x + e) - model.C(x - e)) / (2 * h)
            assert np.max(np.abs(got[..., b, :, :, :] - fd)) < 1e-8


def test_unit_vector_multiplies_to_identity():
    for name in ["trivial_diag(4)", "qh_p1"]:
        model = fixture(name)
        x = model.basepoint
        op = np.einsum("a,aij->ij", model.unit, model.C(x))
        assert np.allclose(op, np.eye(model.n), atol=1e-14)


def test_fixture_parser():
    assert fixture("trivial_diag(5)").n == 5
    with pytest.raises(KeyError):
        fixture("nope")
    with pytest.raises(ValueError):
        fixture("trivial_diag(0)")
