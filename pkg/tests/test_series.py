"""Tests for the truncated matrix Laurent series algebra.

The product oracle is a naive double loop over exponent pairs, written
independently of the library's convolution; window bookkeeping is checked
against hand-computed windows.
"""

from __future__ import annotations

import numpy as np
import pytest

from froblax.series import HSeries, LeadingCoefficientSingular, SeriesError, max_abs_diff

RNG = np.random.default_rng(20260814)


def random_series(n: int, k_min: int, k_max: int, density: float = 0.9) -> HSeries:
    coeffs = {}
    for k in range(k_min, k_max + 1):
        if RNG.random() < density:
            coeffs[k] = RNG.standard_normal((n, n)) + 1j * RNG.standard_normal((n, n))
    if not coeffs:
        return HSeries.zero(n, k_min, k_max)
    s = HSeries.zero(n, k_min, k_max)
    return HSeries(coeffs, k_min, k_max) if coeffs else s


def naive_product_coeff(a: HSeries, b: HSeries, k: int) -> np.ndarray:
    """Oracle: brute-force Cauchy coefficient, looping over all stored pairs."""
    acc = np.zeros((a.n, a.n), dtype=np.complex128)
    for i in a.exponents():
        for j in b.exponents():
            if i + j == k:
                acc = acc + a.coeffs[i] @ b.coeffs[j]
    return acc


# --------------------------------------------------------------------- #
# windows


def test_sum_window_is_min_min():
    a = random_series(2, 0, 3)
    b = random_series(2, -2, 1)
    s = a + b
    assert s.window == (-2, 1)


def test_product_window_rule():
    a = random_series(2, 1, 4)
    b = random_series(2, -1, 2)
    p = a @ b
    # [1 + (-1), min(4 + (-1), 1 + 2)] = [0, 3]
    assert p.window == (0, 3)


def test_window_never_widens_under_clip():
    a = random_series(3, -1, 5)
    c = a.clip(k_min=0, k_max=3)
    assert c.window == (0, 3)
    assert c.exponents() == [k for k in a.exponents() if 0 <= k <= 3]


def test_empty_window_rejected():
    with pytest.raises(SeriesError):
        HSeries.zero(2, 1, 0)


# --------------------------------------------------------------------- #
# product against the naive oracle


def test_product_matches_naive_convolution():
    for _ in range(20):
        n = int(RNG.integers(1, 4))
        a = random_series(n, int(RNG.integers(-3, 1)), int(RNG.integers(1, 5)))
        b = random_series(n, int(RNG.integers(-3, 1)), int(RNG.integers(1, 5)))
        p = a @ b
        for k in range(p.k_min, p.k_max + 1):
            assert np.allclose(p.coeff(k), naive_product_coeff(a, b, k), atol=1e-13)


def test_product_is_noncommutative_but_associative():
    a = random_series(3, 0, 4)
    b = random_series(3, -1, 3)
    c = random_series(3, 0, 2)
    ab_c = (a @ b) @ c
    a_bc = a @ (b @ c)
    lo, hi = max(ab_c.k_min, a_bc.k_min), min(ab_c.k_max, a_bc.k_max)
    assert lo <= hi
    assert max_abs_diff(ab_c.clip(lo, hi), a_bc.clip(lo, hi)) < 1e-12
    # genuine non-commutativity on a witness pair
    ab = a @ b
    ba = b @ a
    lo, hi = max(ab.k_min, ba.k_min), min(ab.k_max, ba.k_max)
    assert max_abs_diff(ab.clip(lo, hi), ba.clip(lo, hi)) > 1e-6


def test_distributivity():
    a = random_series(2, -1, 3)
    b = random_series(2, -1, 3)
    c = random_series(2, 0, 2)
    lhs = (a + b) @ c
    rhs = (a @ c) + (b @ c)
    assert max_abs_diff(lhs, rhs) < 1e-12


def test_identity_neutral():
    a = random_series(3, -2, 3)
    e = HSeries.identity(3, k_max=6)
    assert max_abs_diff(a @ e, a.clip(k_max=(a.k_min + 6))) < 1e-14
    assert max_abs_diff(e @ a, a.clip(k_max=(a.k_min + 6))) < 1e-14


# --------------------------------------------------------------------- #
# inverse


def test_inverse_neumann_example():
    # (Id + hbar N)^{-1} = Id - hbar N + hbar^2 N^2 - ...
    n = 3
    N = RNG.standard_normal((n, n)) + 1j * RNG.standard_normal((n, n))
    a = HSeries({0: np.eye(n), 1: N}, 0, 1)
    inv = a.inverse(order=5)
    assert inv.window == (0, 5)
    for j in range(6):
        expect = ((-1) ** j) * np.linalg.matrix_power(N, j)
        assert np.allclose(inv.coeff(j), expect, atol=1e-12)


def test_inverse_two_sided():
    for _ in range(10):
        n = int(RNG.integers(1, 4))
        m = int(RNG.integers(-2, 3))
        coeffs = {m + j: RNG.standard_normal((n, n)) + 1j * RNG.standard_normal((n, n))
                  for j in range(4)}
        # make the leading coefficient well conditioned
        coeffs[m] = coeffs[m] + 3.0 * np.eye(n)
        a = HSeries(coeffs, m, m + 3)
        inv = a.inverse(order=6)
        assert inv.window == (-m, -m + 6)
        left = inv @ a
        right = a @ inv
        eye = HSeries.identity(n, k_max=min(left.k_max, right.k_max))
        assert max_abs_diff(left, eye.clip(k_max=left.k_max)) < 1e-10
        assert max_abs_diff(right, eye.clip(k_max=right.k_max)) < 1e-10


def test_inverse_singular_leading_coefficient():
    a = HSeries({0: np.array([[1.0, 0.0], [0.0, 0.0]])}, 0, 2)
    with pytest.raises(LeadingCoefficientSingular):
        a.inverse(order=3)


def test_inverse_of_zero_series():
    z = HSeries.zero(2, 0, 4)
    with pytest.raises(LeadingCoefficientSingular):
        z.inverse(order=2)


# --------------------------------------------------------------------- #
# projections


def test_projection_partition_resums():
    for _ in range(10):
        a = random_series(2, int(RNG.integers(-4, 0)), int(RNG.integers(0, 5)))
        k = int(RNG.integers(a.k_min - 1, a.k_max + 2))
        hi = a.project(k, "geq")
        lo = a.project(k, "lt")
        if hi.max_abs() == 0.0 and k > a.k_max:
            # everything fell below k; the geq half is the zero series
            assert lo.exponents() == a.exponents()
            continue
        back = hi + lo
        assert back.window[1] >= a.k_max or k > a.k_max
        assert max_abs_diff(back.clip(a.k_min, a.k_max), a) == 0.0


def test_projection_halves_disjoint():
    a = random_series(2, -2, 4)
    k = 1
    hi, lo = a.project(k, "geq"), a.project(k, "lt")
    assert all(j >= k for j in hi.exponents())
    assert all(j < k for j in lo.exponents())


def test_projection_at_window_bottom_is_identity():
    a = random_series(2, -1, 3)
    assert a.project(a.k_min, "geq").exponents() == a.exponents()


# --------------------------------------------------------------------- #
# bar transpose


def test_bar_transpose_coefficients():
    a = random_series(2, -2, 3)
    b = a.bar_transpose()
    for k in range(-2, 4):
        assert np.allclose(b.coeff(k), ((-1) ** (k % 2)) * a.coeff(k).T)


def test_bar_transpose_antihomomorphism():
    a = random_series(3, 0, 3)
    b = random_series(3, -1, 2)
    lhs = (a @ b).bar_transpose()
    rhs = b.bar_transpose() @ a.bar_transpose()
    assert max_abs_diff(lhs, rhs) < 1e-12


def test_bar_transpose_involution():
    a = random_series(3, -2, 2)
    assert max_abs_diff(a.bar_transpose().bar_transpose(), a) == 0.0


# --------------------------------------------------------------------- #
# batched coefficients


def test_batched_matches_pointwise():
    B, n = 5, 2
    stacked_a = {k: RNG.standard_normal((B, n, n)) + 1j * RNG.standard_normal((B, n, n))
                 for k in range(0, 3)}
    stacked_b = {k: RNG.standard_normal((B, n, n)) + 1j * RNG.standard_normal((B, n, n))
                 for k in range(-1, 2)}
    A = HSeries(stacked_a, 0, 2)
    Bs = HSeries(stacked_b, -1, 1)
    P = A @ Bs
    for p in range(B):
        a_p = HSeries({k: v[p] for k, v in stacked_a.items()}, 0, 2)
        b_p = HSeries({k: v[p] for k, v in stacked_b.items()}, -1, 1)
        p_p = a_p @ b_p
        for k in range(P.k_min, P.k_max + 1):
            assert np.allclose(P.coeff(k)[p], p_p.coeff(k), atol=1e-13)


def test_batched_inverse():
    B, n = 4, 3
    coeffs = {0: np.broadcast_to(np.eye(n), (B, n, n)).copy(),
              1: RNG.standard_normal((B, n, n))}
    a = HSeries(coeffs, 0, 4)  # exact polynomial: orders 2..4 genuinely zero
    inv = a.inverse(order=4)
    prod = inv @ a
    assert prod.window == (0, 4)
    eye = np.eye(n)
    assert np.allclose(prod.coeff(0), np.broadcast_to(eye, (B, n, n)), atol=1e-12)
    for k in range(1, 5):
        assert np.max(np.abs(prod.coeff(k))) < 1e-12


# --------------------------------------------------------------------- #
# serialization


def test_json_round_trip():
    a = random_series(2, -2, 3)
    d = a.to_json_dict()
    b = HSeries.from_json_dict(d)
    assert b.window == a.window and b.n == a.n
    assert max_abs_diff(a, b) == 0.0


def test_json_rejects_batched():
    a = HSeries({0: np.zeros((2, 3, 3)) + 1.0}, 0, 1)
    with pytest.raises(SeriesError):
        a.to_json_dict()


# --------------------------------------------------------------------- #
# immutability


def test_coefficients_frozen():
    a = random_series(2, 0, 2)
    k = a.exponents()[0]
    with pytest.raises(ValueError):
        a.coeffs[k][0, 0] = 99.0
