"""Stencil and spectral-derivative checks against closed forms."""

from __future__ import annotations

import numpy as np

from froblax.diffops import fd_derivative, loop_integral, spectral_derivative


def test_fd_order2_convergence():
    errs = []
    for m in (65, 129, 257):
        x = np.linspace(-1.0, 1.0, m)
        f = np.exp(x) * np.sin(3 * x)
        df = np.exp(x) * (np.sin(3 * x) + 3 * np.cos(3 * x))
        got = fd_derivative(f, x[1] - x[0], order=2)
        errs.append(np.max(np.abs(got - df)))
    assert errs[0] / errs[1] > 3.4
    assert errs[1] / errs[2] > 3.4


def test_fd_order4_convergence():
    errs = []
    for m in (17, 33, 65):
        x = np.linspace(-1.0, 1.0, m)
        f = np.exp(x) * np.sin(3 * x)
        df = np.exp(x) * (np.sin(3 * x) + 3 * np.cos(3 * x))
        got = fd_derivative(f, x[1] - x[0], order=4)
        errs.append(np.max(np.abs(got - df)))
    assert errs[0] / errs[1] > 13.0
    assert errs[1] / errs[2] > 13.0


def test_fd_exact_on_low_degree_polynomials():
    x = np.linspace(0.0, 2.0, 9)
    for order, deg in ((2, 2), (4, 4)):
        f = x ** deg
        got = fd_derivative(f, x[1] - x[0], order=order)
        assert np.max(np.abs(got - deg * x ** (deg - 1))) < 1e-11


def test_fd_along_other_axis_complex():
    x = np.linspace(0.0, 1.0, 41)
    f = np.exp((1.0 + 2.0j) * x)[None, :] * np.ones((3, 1))
    got = fd_derivative(f, x[1] - x[0], axis=1, order=4)
    want = (1.0 + 2.0j) * f
    # boundary stencil constant dominates: h^4 |f^(5)| / 5
    assert np.max(np.abs(got - want)) < 2e-5


def test_spectral_derivative_band_limited_exact():
    m = 32
    s = np.linspace(0.0, 2.0 * np.pi, m, endpoint=False)
    f = np.exp(2j * s) + 0.5 * np.cos(3 * s)
    df = 2j * np.exp(2j * s) - 1.5 * np.sin(3 * s)
    got = spectral_derivative(f)
    assert np.max(np.abs(got - df)) < 1e-12


def test_spectral_derivative_other_period():
    m = 64
    period = 4.0
    s = np.linspace(0.0, period, m, endpoint=False)
    f = np.sin(2.0 * np.pi * s / period)
    got = spectral_derivative(f, period=period)
    want = (2.0 * np.pi / period) * np.cos(2.0 * np.pi * s / period)
    assert np.max(np.abs(got - want)) < 1e-12


def test_loop_integral_matches_analytic():
    m = 128
    s = np.linspace(0.0, 2.0 * np.pi, m, endpoint=False)
    f = np.exp(0.3 * np.cos(s))
    # modified Bessel: integral of exp(z cos s) over the loop is 2 pi I0(z)
    from scipy.special import iv

    assert abs(loop_integral(f) - 2.0 * np.pi * iv(0, 0.3)) < 1e-12
