"""Half-infinite Hodge bridge: fundamental solution, pairing, symbol map.

A flat family carries a fundamental solution ``phi(x, hbar)``, a matrix power
series in ``1/hbar`` solving ``d_alpha phi = hbar^{-1} phi C_alpha`` with
``phi = Id`` at the basepoint.  Its columns span a moving lattice whose
geometry encodes the family: the pairing built from ``phi`` recovers the flat
metric, the symbol of ``d/dx`` recovers the multiplication tensor, and the
hierarchy flows move the lattice by ``hbar^{-r}`` -- each statement checked
here per coefficient on the reliable exponent window of the truncation.

Truncation convention: a depth-``K`` object stores coefficients of
``hbar^0 .. hbar^{-K}`` and is exactly zero above order 0; products of such
objects are trusted only on windows the missing tail cannot reach, which every
operation below tracks explicitly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .dressing import _spline_deriv_2d
from .flows import (
    FlowGenerator,
    GridState,
    Trajectory,
    _comm,
    _grid_dressing,
    phi_of_b,
)
from .models import FrobeniusModel
from .reduction import PathInconsistency, _cumulative_from
from .series import HSeries

__all__ = [
    "FundamentalSolution",
    "PairingWindow",
    "fundamental_solution",
    "pairing_G",
    "check_eqprfrob",
    "symbol_map",
    "isotropy_report",
    "check_higher_time",
    "largest_extension_check",
]


# --------------------------------------------------------------------- #
# fundamental solution


@dataclass
class FundamentalSolution:
    """Truncated fundamental solution ``phi = sum_k hbar^{-k} phi_k``.

    ``phi`` has shape grid + (K_vhs + 1, n, n) with slot k holding ``phi_k``;
    ``phi_0 = Id`` everywhere and ``phi(basepoint) = Id`` (all higher slots
    vanish there), which fixes the constant-loop-group ambiguity.
    """

    K_vhs: int
    axes: tuple[np.ndarray, ...]
    phi: np.ndarray
    eta: np.ndarray
    basepoint: np.ndarray
    base_idx: tuple[int, ...]
    path_consistency: float
    residual_interior: float
    quadrature: str

    @property
    def n(self) -> int:
        return self.phi.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.phi.shape[:-3]

    def node_of(self, x) -> tuple[int, ...]:
        """Grid index of ``x``, which must sit on a node (guarded lookup)."""
        x = np.asarray(x, dtype=float)
        idx = []
        for d, ax in enumerate(self.axes):
            i = int(np.argmin(np.abs(ax - x[d])))
            span = max(1.0, float(ax[-1] - ax[0]))
            if abs(ax[i] - x[d]) > 1e-9 * span:
                raise ValueError(f"point {x} is not a grid node of the "
                                 "fundamental solution")
            idx.append(i)
        return tuple(idx)

    def coeffs_at(self, idx) -> np.ndarray:
        """The stack ``phi_0 .. phi_K`` at one node; (K_vhs + 1, n, n)."""
        return self.phi[tuple(idx)]

    def inverse_at(self, idx) -> np.ndarray:
        """Coefficient stack of ``phi^{-1}`` at one node, same layout."""
        return _inverse_stack(self.coeffs_at(idx))


def _inverse_stack(phi: np.ndarray) -> np.ndarray:
    """Depth-wise inverse of ``sum_k hbar^{-k} phi[k]`` (unit order-0 term).

    Works batched: ``phi`` is (..., K+1, n, n) with slot axis third-last.
    """
    K = phi.shape[-3] - 1
    inv = np.empty_like(phi)
    inv0 = np.linalg.inv(phi[..., 0, :, :])
    inv[..., 0, :, :] = inv0
    for k in range(1, K + 1):
        acc = np.zeros_like(inv0)
        for i in range(1, k + 1):
            acc = acc + phi[..., i, :, :] @ inv[..., k - i, :, :]
        inv[..., k, :, :] = -inv0 @ acc
    return inv


def _cumulative_trap_from(x: np.ndarray, f: np.ndarray, x0: float) -> np.ndarray:
    out = cumulative_trapezoid(f, x, initial=0.0)
    i0 = int(np.argmin(np.abs(x - x0)))
    return out - out[i0]


def _leg(quadrature: str):
    return _cumulative_from if quadrature == "spline" else _cumulative_trap_from


def _path_integrate(axes, F, base_idx, order, quadrature) -> np.ndarray:
    """Integrate ``d(phi) = F_alpha dx^alpha`` from the base node to every node.

    ``F`` is grid + (n_dir, n, n); the result is grid + (n, n), vanishing at
    the base node.  Legs run along one axis at a time in the given tree order.
    """
    cum = _leg(quadrature)
    n = F.shape[-1]
    flatF = F.reshape(F.shape[:-2] + (n * n,))
    if len(axes) == 1:
        (ax,) = axes
        out = np.stack([cum(ax, flatF[:, 0, e], ax[base_idx[0]])
                        for e in range(n * n)], axis=-1)
        return out.reshape(F.shape[:-3] + (n, n))

    ax1, ax2 = axes
    bi, bj = base_idx
    m1, m2 = len(ax1), len(ax2)
    out = np.empty((m1, m2, n * n), dtype=np.complex128)
    for e in range(n * n):
        if order == ("rows", "cols"):
            base_row = cum(ax1, flatF[:, bj, 0, e], ax1[bi])           # (m1,)
            for k in range(m1):
                out[k, :, e] = base_row[k] + cum(ax2, flatF[k, :, 1, e],
                                                 ax2[bj])
        else:
            base_col = cum(ax2, flatF[bi, :, 1, e], ax2[bj])           # (m2,)
            for k in range(m2):
                out[:, k, e] = base_col[k] + cum(ax1, flatF[:, k, 0, e],
                                                 ax1[bi])
    return out.reshape(m1, m2, n, n)


def _derivs_for(axes):
    if len(axes) == 2:
        return [_spline_deriv_2d(axes[0], axes[1], ax) for ax in range(2)]

    from scipy.interpolate import CubicSpline

    def d0(F: np.ndarray) -> np.ndarray:
        flat = F.reshape(F.shape[0], -1)
        out = np.empty_like(flat)
        for e in range(flat.shape[-1]):
            out[:, e] = (CubicSpline(axes[0], flat[:, e].real)(axes[0], 1)
                         + 1j * CubicSpline(axes[0], flat[:, e].imag)(axes[0], 1))
        return out.reshape(F.shape)

    return [d0]


def _second_deriv_for(axes, al: int, be: int):
    """Direct second partial from one global quintic fit.

    Differentiating a fitted first-derivative field again amplifies the fit
    noise by 1/h; a single ``partial_derivative`` keeps the truncation at the
    fit's own order, which the residual budgets here need.
    """
    if len(axes) == 2:
        from scipy.interpolate import RectBivariateSpline

        orders = [0, 0]
        orders[al] += 1
        orders[be] += 1
        kw = {"dx": orders[0], "dy": orders[1]}

        def deriv2(F: np.ndarray) -> np.ndarray:
            flat = F.reshape(F.shape[0], F.shape[1], -1)
            out = np.empty_like(flat)
            for k in range(flat.shape[-1]):
                sr = RectBivariateSpline(axes[0], axes[1], flat[..., k].real,
                                         kx=5, ky=5)
                si = RectBivariateSpline(axes[0], axes[1], flat[..., k].imag,
                                         kx=5, ky=5)
                out[..., k] = sr(axes[0], axes[1], **kw) \
                    + 1j * si(axes[0], axes[1], **kw)
            return out.reshape(F.shape)

        return deriv2

    from scipy.interpolate import make_interp_spline

    def deriv2_1d(F: np.ndarray) -> np.ndarray:
        flat = F.reshape(F.shape[0], -1)
        out = np.empty_like(flat)
        for e in range(flat.shape[-1]):
            out[:, e] = (make_interp_spline(axes[0], flat[:, e].real, k=5)
                         .derivative(2)(axes[0])
                         + 1j * make_interp_spline(axes[0], flat[:, e].imag,
                                                   k=5).derivative(2)(axes[0]))
        return out.reshape(F.shape)

    return deriv2_1d


def _interior(shape_nd: tuple[int, ...]) -> tuple:
    # the global quintic fit carries a boundary layer of roughly its stencil
    # width; residual maxima are read strictly inside it
    return tuple(slice(6, -6) for _ in shape_nd)


def fundamental_solution(model: FrobeniusModel,
                         shape: tuple[int, ...] = (65, 65),
                         K_vhs: int = 4,
                         bounds: Optional[tuple] = None,
                         path_tol: float = 1e-5,
                         quadrature: str = "spline",
                         tree: str = "rows") -> FundamentalSolution:
    """Integrate ``d_alpha phi_{k+1} = phi_k C_alpha`` over a spanning tree.

    Each order is a closed matrix-valued one-form (closedness is exactly the
    commutativity plus potentiality of the family), integrated leg by leg with
    the antiderivative of a cubic spline through the sampled integrand
    (O(h^4)); ``quadrature="trapezoid"`` selects plain trapezoid sums (O(h^2))
    instead, which needs far finer grids for the same residuals.  The same
    integral is formed along the transposed tree and the disagreement is the
    ``path_consistency`` report (raises :class:`PathInconsistency` beyond
    ``path_tol``).  ``tree`` picks which tree's values are kept.
    """
    if K_vhs < 1:
        raise ValueError("K_vhs must be >= 1")
    if quadrature not in ("spline", "trapezoid"):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    if tree not in ("rows", "cols"):
        raise ValueError(f"unknown tree {tree!r}")
    n = model.n
    if n > 2:
        raise NotImplementedError("fundamental solutions are implemented for n <= 2")
    if bounds is None:
        bounds = model.domain
    if len(shape) != n:
        raise ValueError(f"shape must have {n} entries")
    if min(shape) < 17:
        raise ValueError("need at least 17 nodes per axis (residuals are "
                         "read outside the fit's boundary layer)")
    axes = tuple(np.linspace(lo, hi, m) for (lo, hi), m in zip(bounds, shape))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1)
    grid_shape = pts.shape[:-1]
    base_idx = tuple(int(np.argmin(np.abs(ax - b)))
                     for ax, b in zip(axes, model.basepoint))

    C = model.C(pts).astype(np.complex128)            # grid + (n_dir, n, n)
    phi = np.zeros(grid_shape + (K_vhs + 1, n, n), dtype=np.complex128)
    phi[..., 0, :, :] = np.eye(n)

    orders = (("rows", "cols"), ("cols", "rows"))
    primary = 0 if tree == "rows" else 1
    path_res = 0.0
    for k in range(1, K_vhs + 1):
        F = np.einsum("...ij,...ajk->...aik", phi[..., k - 1, :, :], C)
        legs = [_path_integrate(axes, F, base_idx, order, quadrature)
                for order in (orders if n == 2 else orders[:1])]
        if n == 2:
            path_res = max(path_res,
                           float(np.max(np.abs(legs[0] - legs[1]))))
        phi[..., k, :, :] = legs[primary if n == 2 else 0]
    if path_res > path_tol:
        raise PathInconsistency(
            f"fundamental-solution paths disagree by {path_res:.3e} "
            f"(tol {path_tol:.1e}); the order forms are not closed on this grid")

    # independent residual: spline derivatives against the defining equation
    d = _derivs_for(axes)
    inner = _interior(grid_shape)
    res = 0.0
    for k in range(1, K_vhs + 1):
        F = np.einsum("...ij,...ajk->...aik", phi[..., k - 1, :, :], C)
        for al in range(len(axes)):
            r = d[al](phi[..., k, :, :]) - F[..., al, :, :]
            res = max(res, float(np.max(np.abs(r[inner]))))

    return FundamentalSolution(
        K_vhs=K_vhs, axes=axes, phi=phi,
        eta=np.asarray(model.eta, dtype=float),
        basepoint=np.asarray(model.basepoint, dtype=float),
        base_idx=base_idx, path_consistency=path_res,
        residual_interior=res, quadrature=quadrature,
    )


# --------------------------------------------------------------------- #
# the pairing


def _sym_g(v: np.ndarray, u: np.ndarray, eta: np.ndarray):
    """The flat bilinear form, symmetrized so g(v, u) == g(u, v) bitwise."""
    a = np.einsum("...i,ij,...j->...", v, eta, u)
    b = np.einsum("...i,ij,...j->...", u, eta, v)
    return 0.5 * (a + b)


def _eta_pair(p: dict, q: dict, eta: np.ndarray, lo: int, hi: int) -> dict:
    """Pairing of exponent-keyed vectors: ``sum (-1)^j hbar^{i+j} g(p_i, q_j)``.

    Terms are grouped per unordered pair of DEPTHS below the two windows'
    tops and accumulated depth-ascending.  The grouping is invariant under
    shifting either window and under swapping the arguments, so the twisted
    symmetry and the hbar-linearity of the pairing hold bitwise, not merely
    to rounding.  Inputs must be dense on their windows (as every
    :func:`_series_apply` output is).
    """
    top_p, top_q = max(p), max(q)
    out = {}
    for m in range(lo, hi + 1):
        total = top_p + top_q - m
        acc = None
        for d1 in range(0, total // 2 + 1):
            d2 = total - d1
            t = None
            if (top_p - d1) in p and (top_q - d2) in q:
                t = ((-1.0) ** ((top_q - d2) % 2)
                     * _sym_g(p[top_p - d1], q[top_q - d2], eta))
            if d1 != d2 and (top_p - d2) in p and (top_q - d1) in q:
                t2 = ((-1.0) ** ((top_q - d1) % 2)
                      * _sym_g(p[top_p - d2], q[top_q - d1], eta))
                t = t2 if t is None else t + t2
            if t is not None:
                acc = t if acc is None else acc + t
        if acc is not None:
            out[m] = acc
    return out


def _series_apply(mat_stack: np.ndarray, vec: dict, top_shift: int = 0) -> dict:
    """Apply a depth-stack matrix series to an exponent-keyed vector.

    ``mat_stack[d]`` sits at exponent ``-d``.  Returns exponents down to
    ``(top of vec) - K`` -- the window the missing tail of the stack cannot
    reach -- shifted up by ``top_shift`` (e.g. 1 for a leading ``hbar``).
    """
    K = mat_stack.shape[-3] - 1
    top = max(vec)
    out = {}
    for m in range(top - K, top + 1):
        acc = None
        for d in range(0, K + 1):
            j = m + d
            if j not in vec:
                continue
            t = np.einsum("...ij,...j->...i", mat_stack[..., d, :, :], vec[j])
            acc = t if acc is None else acc + t
        if acc is not None:
            out[m + top_shift] = acc
    return out


@dataclass
class PairingWindow:
    """Scalar Laurent coefficients of a pairing value on a reliable window."""

    coeffs: dict
    k_min: int
    k_max: int
    x_independence: float = 0.0

    def coeff(self, k: int):
        if not self.k_min <= k <= self.k_max:
            raise KeyError(f"order {k} outside reliable window "
                           f"[{self.k_min}, {self.k_max}]")
        zero = 0.0 * next(iter(self.coeffs.values()))
        return self.coeffs.get(k, zero)

    def exponents(self) -> list[int]:
        return list(range(self.k_min, self.k_max + 1))


def _as_vector_dict(a) -> dict:
    if isinstance(a, dict):
        return {int(k): np.asarray(v, dtype=np.complex128)
                for k, v in a.items()}
    raise TypeError("series vectors are exponent-keyed dicts {k: (n,) array}")


def _pair_at(a: dict, b: dict, inv_stack: np.ndarray, eta: np.ndarray,
             n: int) -> dict:
    K = inv_stack.shape[-3] - 1
    p = _series_apply(inv_stack, a, top_shift=1)
    q = _series_apply(inv_stack, b, top_shift=1)
    lo = max(p) + max(q) - K
    hi = max(p) + max(q)
    raw = _eta_pair(p, q, eta, lo, hi)
    return {m + n - 2: c for m, c in raw.items()}


def pairing_G(a, b, fs: FundamentalSolution, x=None) -> PairingWindow:
    """``G(a, b) = hbar^{n-2} eta(hbar phi^{-1} a, hbar phi^{-1} b)`` at ``x``.

    ``a`` and ``b`` are exponent-keyed vectors ``{k: (n,) array}``.  The value
    is independent of ``x`` for an exact ``phi`` (the form is compatible with
    the multiplication); the report field ``x_independence`` holds the actual
    deviation between the requested point and the basepoint, where ``phi`` is
    exactly the identity.
    """
    a = _as_vector_dict(a)
    b = _as_vector_dict(b)
    n = fs.n
    idx = fs.base_idx if x is None else fs.node_of(x)
    co = _pair_at(a, b, fs.inverse_at(idx), fs.eta, n)
    ref = _pair_at(a, b, fs.inverse_at(fs.base_idx), fs.eta, n)
    dev = max(abs(complex(co[m] - ref[m])) for m in co)
    return PairingWindow(coeffs=co, k_min=min(co), k_max=max(co),
                         x_independence=dev)


def isotropy_report(fs: FundamentalSolution, x=None,
                    shifts: Sequence[int] = (0, 1)) -> dict:
    """Lattice isotropy: ``G`` of any two lattice generators starts at hbar^n.

    Pairs every ``hbar^k phi_alpha`` with every ``hbar^l phi_beta`` for k, l
    in ``shifts`` and reports the largest coefficient strictly below order n
    inside the reliable window, plus the (nonzero) order-n coefficient scale.
    """
    idx = fs.base_idx if x is None else fs.node_of(x)
    stack = fs.coeffs_at(idx)
    inv = fs.inverse_at(idx)
    n = fs.n
    below = 0.0
    at_n = 0.0
    for k in shifts:
        for l in shifts:
            for al in range(n):
                for be in range(n):
                    a = {k - d: stack[d, :, al] for d in range(fs.K_vhs + 1)}
                    b = {l - d: stack[d, :, be] for d in range(fs.K_vhs + 1)}
                    co = _pair_at(a, b, inv, fs.eta, n)
                    for m, c in co.items():
                        if m < n:
                            below = max(below, abs(complex(c)))
                        elif m == n:
                            at_n = max(at_n, abs(complex(c)))
    return {"below_n": below, "at_n": at_n}


# --------------------------------------------------------------------- #
# the defining identities


def check_eqprfrob(fs: FundamentalSolution, model: FrobeniusModel) -> dict:
    """Residuals of the three structural identities of ``psi = phi . unit``.

    ``psi`` is ``phi`` applied to the (constant) components of the unit
    field; since multiplication by the unit is the identity, ``d_a psi =
    hbar^{-1} phi_a`` columnwise, and when the first coordinate direction is
    the unit -- the usual normalization -- ``psi`` is just the first column.
    The identities checked, each per hbar-coefficient:

    (i)   second derivatives reproduce the multiplication:
          ``d_a d_b psi = hbar^{-1} C_ab^g d_g psi``;
    (ii)  the pairing of first derivatives is the flat metric:
          ``G(d_a psi, d_b psi) = hbar^{n-2} eta_ab`` on the window;
    (iii) the unit direction reproduces the generator:
          ``unit^a d_a psi = hbar^{-1} psi``.

    All spatial derivatives are global spline derivatives; grid maxima are
    taken over the interior (two-node margin).  ``eta_constancy`` pairs two
    fixed vectors against ``phi(x)`` over the grid -- exactly constant for an
    exact ``phi`` -- and reports the largest cross-point deviation, a sharper
    probe of the integration than (ii), which also carries derivative error.
    """
    n = fs.n
    K = fs.K_vhs
    axes = fs.axes
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    C = model.C(pts).astype(np.complex128)
    u = np.asarray(model.unit, dtype=np.complex128)
    psi = np.einsum("...ij,j->...i", fs.phi, u)      # grid + (K+1, n)
    d = _derivs_for(axes)
    inner = _interior(fs.shape)
    n_dir = len(axes)

    dpsi = np.stack([d[al](psi) for al in range(n_dir)], axis=-3)
    # grid + (n_dir, K+1, n)

    # identity (i): d_al d_be psi_k = sum_g (C_al)^g_be d_g psi_{k-1}
    res1 = 0.0
    for al in range(n_dir):
        for be in range(al, n_dir):
            second = _second_deriv_for(axes, al, be)(psi)  # grid + (K+1, n)
            for k in range(1, K + 1):
                rhs = np.einsum("...g,...gj->...j",
                                C[..., al, :, be],
                                dpsi[..., :, k - 1, :])
                r = second[..., k, :] - rhs
                res1 = max(res1, float(np.max(np.abs(r[inner]))))

    res3 = 0.0
    e_dpsi = np.einsum("a,...aki->...ki", u, dpsi)
    for k in range(1, K + 1):
        r = e_dpsi[..., k, :] - psi[..., k - 1, :]
        res3 = max(res3, float(np.max(np.abs(r[inner]))))

    # identity (ii) on the reliable window, vectorized over the grid
    inv = _inverse_stack(fs.phi)
    eta = fs.eta
    res2 = 0.0
    for al in range(n_dir):
        va = {-k: dpsi[..., al, k, :] for k in range(K + 1)}
        pa = _series_apply(inv, va, top_shift=1)
        for be in range(al, n_dir):
            vb = {-k: dpsi[..., be, k, :] for k in range(K + 1)}
            pb = _series_apply(inv, vb, top_shift=1)
            lo, hi = max(pa) + max(pb) - K, max(pa) + max(pb)
            co = _eta_pair(pa, pb, eta, lo, hi)
            for m, c in co.items():
                target = eta[al, be] if m + n - 2 == n - 2 else 0.0
                res2 = max(res2, float(np.max(np.abs((c - target)[inner]))))

    # cross-point constancy of the pairing on fixed vectors
    base = fs.base_idx
    fixed = [{-k: dpsi[base][al, k, :] for k in range(K + 1)}
             for al in range(n_dir)]
    const_dev = 0.0
    for al in range(n_dir):
        pa = _series_apply(inv, fixed[al], top_shift=1)
        for be in range(al, n_dir):
            pb = _series_apply(inv, fixed[be], top_shift=1)
            lo, hi = max(pa) + max(pb) - K, max(pa) + max(pb)
            co = _eta_pair(pa, pb, eta, lo, hi)
            for m, c in co.items():
                ref = c[base]
                const_dev = max(const_dev,
                                float(np.max(np.abs((c - ref)[inner]))))
    return {
        "second_derivative": res1,
        "pairing_metric": res2,
        "unit_direction": res3,
        "eta_constancy": const_dev,
    }


# --------------------------------------------------------------------- #
# the symbol of d/dx


def symbol_map(fs: FundamentalSolution, model: FrobeniusModel, x=None) -> dict:
    """Recover the multiplication tensor from the moving lattice at ``x``.

    The derivative of each column lies one step down the lattice; expanding
    ``phi^{-1} d_beta phi`` and reading the ``hbar^{-1}`` coefficient gives
    the matrix of the symbol in the column bases, which must equal
    ``C_beta(x)``.  Coefficients at orders <= -2 measure the failure of
    transversality (they vanish for the true solution), and contracting the
    direction slot with the unit field must give the identity matrix -- the
    unit axiom transported through the lattice.
    """
    idx = fs.base_idx if x is None else fs.node_of(x)
    axes = fs.axes
    d = _derivs_for(axes)
    K = fs.K_vhs
    n = fs.n
    xpt = np.array([ax[i] for ax, i in zip(axes, idx)])
    C = model.C(xpt).astype(np.complex128)
    inv = fs.inverse_at(idx)

    u = np.asarray(model.unit, dtype=np.complex128)
    deviation = 0.0
    transversality = 0.0
    symbol1 = []
    upper = 0.0
    for be in range(len(axes)):
        dphi = np.stack([d[be](fs.phi[..., k, :, :])[idx]
                         for k in range(K + 1)], axis=0)  # (K+1, n, n)
        # N = phi^{-1} d_be phi, coefficient at exponent -m: sum of inv/dphi
        for m in range(0, K + 1):
            Nm = np.zeros((n, n), dtype=np.complex128)
            for i in range(0, m + 1):
                Nm += inv[i] @ dphi[m - i]
            if m == 1:
                deviation = max(deviation,
                                float(np.max(np.abs(Nm - C[be]))))
                symbol1.append(Nm)
            elif m >= 2:
                transversality = max(transversality,
                                     float(np.max(np.abs(Nm))))
            else:
                upper = max(upper, float(np.max(np.abs(Nm))))
    unit_sym = np.einsum("b,bij->ij", u, np.stack(symbol1, axis=0))
    unit_dev = float(np.max(np.abs(unit_sym - np.eye(n))))
    return {
        "deviation": deviation,
        "unit_direction": unit_dev,
        "transversality": transversality,
        "upper_window": upper,
    }


# --------------------------------------------------------------------- #
# higher times: zero curvature along integrated trajectories


def check_higher_time(traj: Trajectory, gen: FlowGenerator,
                      index: Optional[int] = None,
                      K: Optional[int] = None,
                      collision_tol: float = 1e-8,
                      consistency_tol: float = 1e-3,
                      ablate: Optional[int] = None) -> dict:
    """Zero-curvature residuals of ``[d_t - phi(b)_{<0}, d_alpha - hbar^{-1} C_alpha]``.

    The time derivative of the family is measured from the recorded snapshots
    (centered difference across one recording interval), so the check fails
    if the integrated trajectory stops solving the flow -- it does not reuse
    the analytic velocity.  With ``A_j = phi(b)_{-j}`` the residual splits by
    order into

        order -1      : d_alpha A_1 - dC_alpha/dt
        order -j      : d_alpha A_j + [A_{j-1}, C_alpha]   (2 <= j <= m)
        order -(m+1)  : [A_m, C_alpha]

    each maximized over alpha and over the grid interior (the derivative
    fit's boundary layer is excluded, as everywhere in this module).
    ``ablate=j`` zeroes ``A_j`` before the comparison: the order ``-j``
    residual must then jump to the size of the discarded derivative term,
    which is the self-test that the residual has teeth.
    """
    if len(traj.states) < 3:
        raise ValueError("need at least three recorded snapshots")
    if not isinstance(traj.states[0], GridState):
        raise NotImplementedError("the higher-time check runs on grid trajectories")
    gaps_t = np.diff(traj.times)
    if not np.allclose(gaps_t, gaps_t[0], rtol=1e-12, atol=0.0):
        raise ValueError("recording cadence must be uniform")
    i = len(traj.states) // 2 if index is None else index
    if not 1 <= i <= len(traj.states) - 2:
        raise ValueError("index must have neighbours on both sides")
    state = traj.states[i]
    if len(state.axes) != 2:
        raise NotImplementedError("zero-curvature check needs a 2-d grid")
    delta = float(traj.times[i + 1] - traj.times[i])
    Cdot = (traj.states[i + 1].C - traj.states[i - 1].C) / (2.0 * delta)

    m = gen.m
    Keff = m if K is None else max(K, m)
    _, _, T = _grid_dressing(state, state.C, Keff, collision_tol,
                             consistency_tol)
    phi = phi_of_b(T, gen)
    shape = state.shape + (state.n, state.n)
    A = {j: np.broadcast_to(phi.coeff(-j), shape).copy()
         for j in range(1, m + 1)}
    if ablate is not None:
        if ablate not in A:
            raise ValueError(f"no coefficient A_{ablate} to ablate")
        A[ablate] = np.zeros_like(A[ablate])
    d = _derivs_for(state.axes)

    res: dict[int, float] = {}
    na = state.C.shape[-3]
    inner = _interior(state.shape)
    for j in range(1, m + 2):
        worst = 0.0
        for al in range(na):
            Cal = state.C[..., al, :, :]
            if j == 1:
                r = d[al](A[1]) - Cdot[..., al, :, :]
            elif j <= m:
                r = d[al](A[j]) + _comm(A[j - 1], Cal)
            else:
                r = _comm(A[m], Cal)
            worst = max(worst, float(np.max(np.abs(r[inner]))))
        res[-j] = worst
    return res


# --------------------------------------------------------------------- #
# admissibility of candidate generators


def largest_extension_check(T: HSeries, candidate: HSeries,
                            tol: float = 1e-6) -> dict:
    """Test whether a candidate Lax generator is conjugate to a constant tail.

    Undoing the dressing, ``B = T^{-1} candidate T``, must have purely
    diagonal and state-independent coefficients at every negative order --
    that is the admissibility condition for a flow to extend consistently
    over the whole family.  Returns the recovered diagonals (as a
    :class:`FlowGenerator`-shaped array) when it does.

    Positive orders of B are reported (``upper_residual``) but do not gate
    the verdict: a candidate truncated to its polar part legitimately carries
    dressing debris at order >= 0.
    """
    K = T.k_max
    B = (T.inverse(order=K) @ candidate) @ T
    neg = [k for k in B.exponents() if k < 0]
    window_neg = range(B.k_min, 0)
    n = T.coeff(0).shape[-1]
    eye = np.eye(n, dtype=bool)
    offdiag: dict[int, float] = {}
    nonconst: dict[int, float] = {}
    m = -B.k_min
    entries = np.zeros((m, n), dtype=np.complex128)
    for k in window_neg:
        Bk = B.coeff(k)
        Bk = np.broadcast_to(Bk, T.coeff(0).shape) if Bk.ndim == 2 else Bk
        offdiag[k] = float(np.max(np.abs(np.where(eye, 0.0, Bk))))
        diag = np.einsum("...ii->...i", Bk)
        mean = diag.reshape(-1, n).mean(axis=0)
        nonconst[k] = float(np.max(np.abs(diag - mean)))
        entries[-k - 1] = mean
    upper = 0.0
    for k in B.exponents():
        if k >= 0:
            upper = max(upper, float(np.max(np.abs(B.coeff(k)))))
    ok = bool(neg) and all(offdiag[k] <= tol and nonconst[k] <= tol
                           for k in window_neg)
    return {"ok": ok, "entries": entries if ok else None,
            "offdiag": offdiag, "nonconstancy": nonconst,
            "upper_residual": upper}
