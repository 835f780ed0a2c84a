"""Reduction to canonical coordinates: eigenframes, rotation coefficients, u-grids.

Pointwise, the generic pencil of multiplication operators is diagonalized and
its eigenvectors are normalized against the flat metric; branch order and
signs are fixed at a basepoint and continued over the grid by nearest-neighbor
matching, giving single-valued fields

* ``a_alpha = T0^{-1} C_alpha T0`` (diagonal; the Jacobian of the canonical
  coordinates, ``du^i = sum_alpha a_alpha^i dx^alpha``),
* canonical coordinates ``u`` by path integration from the basepoint,
* rotation coefficients ``q_alpha = T0^{-1} d_alpha T0``.

The eigenvector matrix is stored in a constant eta-orthonormal frame
(``eta = E^T E``), in which ``T0 T0^T = Id`` and every ``q_alpha`` is
antisymmetric; the coordinate-frame eigenvector columns are kept alongside.

``to_u_frame`` resamples the rotation coefficients onto a rectangular grid in
the canonical coordinates by spline-modelling the forward map ``u(x)`` and
inverting it with Newton iterations, producing the fields ``q_i`` and the
symmetric potential ``Q`` with ``q_i = [e_i, Q]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline
from scipy.optimize import linear_sum_assignment

from .diffops import fd_derivative
from .models import FrobeniusModel

__all__ = [
    "EigenvalueCollision",
    "NormalizationSingular",
    "PathInconsistency",
    "eigenframe_at",
    "build_frame",
    "to_u_frame",
    "SemisimpleFrame",
    "UFrame",
    "eta_orthonormal_factor",
]


class EigenvalueCollision(ArithmeticError):
    """Pencil spectrum degenerates (caustic) within the requested region."""


class NormalizationSingular(ArithmeticError):
    """An eigenvector is isotropic for eta: eta(v, v) = 0."""


class PathInconsistency(ArithmeticError):
    """Path-integrated canonical coordinates disagree between two integration paths."""


# --------------------------------------------------------------------- #
# pointwise eigenframe


def eta_orthonormal_factor(eta: np.ndarray) -> np.ndarray:
    """A constant matrix ``E`` with ``E^T E = eta`` (complex allowed).

    For the (real symmetric) metrics of the shipped fixtures this is
    ``sqrt(Lambda) U^T`` from the eigendecomposition ``eta = U Lambda U^T``,
    with the principal square root on possibly negative eigenvalues.
    """
    eta = np.asarray(eta)
    if np.iscomplexobj(eta):
        if np.max(np.abs(eta.imag)) > 1e-13:
            raise NotImplementedError("only real symmetric metrics are supported")
        eta = eta.real
    if np.max(np.abs(eta - eta.T)) > 1e-13:
        raise ValueError("metric must be symmetric")
    lam, U = np.linalg.eigh(eta)
    return np.sqrt(lam.astype(np.complex128))[:, None] * U.T


def _eta_normalize_columns(vecs: np.ndarray, eta: np.ndarray,
                           singular_tol: float = 1e-10) -> np.ndarray:
    """Scale each column v so that eta(v, v) = v^T eta v = 1 (bilinear, not Hermitian)."""
    quad = np.einsum("...ik,ij,...jk->...k", vecs, eta.astype(np.complex128), vecs)
    norm2 = np.einsum("...ik,...ik->...k", vecs.conj(), vecs).real
    if np.any(np.abs(quad) < singular_tol * norm2):
        raise NormalizationSingular("eigenvector isotropic for eta: eta(v, v) = 0")
    return vecs / np.sqrt(quad)[..., None, :]


def _fix_signs_base(vecs: np.ndarray) -> np.ndarray:
    """Resolve the +-1 ambiguity: the first largest-modulus component gets
    argument in (-pi/2, pi/2]."""
    out = vecs.copy()
    n = vecs.shape[-1]
    for k in range(n):
        v = out[..., :, k]
        mags = np.abs(v)
        idx = int(np.argmax(mags >= mags.max() * (1.0 - 1e-12)))
        c = v[idx]
        flip = (c.real < -1e-12 * abs(c)) or (abs(c.real) <= 1e-12 * abs(c) and c.imag < 0)
        if flip:
            out[..., :, k] = -v
    return out


def _conjugated_fields(model: FrobeniusModel, x: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """T^{-1} C_alpha T with a true matrix inverse; (n_a, n, n).

    For an eta-symmetric family the eta-normalized pencil eigenframe satisfies
    T^T eta T = Id and the inverse could be read off as T^T eta, but
    flow-evolved tabulations leave the eta-symmetric class while remaining a
    commuting pencil, so the inverse is computed honestly.
    """
    C = model.C(x).astype(np.complex128)
    vinv = np.linalg.inv(vecs)
    return np.einsum("ik,akl,lj->aij", vinv, C, vecs)


def eigenframe_at(model: FrobeniusModel, x, collision_tol: float = 1e-8):
    """Diagonalize the generic pencil at one point.

    Returns
    -------
    T0_coord : (n, n) complex
        Columns are eta-normalized eigenvectors in the flat coordinate frame,
        ordered by the joint eigenvalue tuple (descending by real part, then
        imaginary part, over alpha = 1..n) with the sign rule applied.
    T0 : (n, n) complex
        The same frame expressed eta-orthonormally, ``T0 = E @ T0_coord``,
        satisfying ``T0 @ T0.T = Id`` when the family is eta-symmetric.
    a : (n, n) complex
        ``a[alpha, i]`` is the eigenvalue of ``C_alpha`` on branch ``i``.

    Raises
    ------
    EigenvalueCollision
        if the pencil spectrum has a gap below ``collision_tol``.
    NormalizationSingular
        if an eigenvector satisfies eta(v, v) = 0.
    """
    x = np.asarray(x, dtype=float)
    P = model.pencil(x)
    lam, vecs = np.linalg.eig(P)
    n = model.n
    if n > 1:
        gaps = np.abs(lam[:, None] - lam[None, :])[~np.eye(n, dtype=bool)]
        if gaps.min() < collision_tol:
            raise EigenvalueCollision(
                f"pencil eigenvalue gap {gaps.min():.3e} below {collision_tol:.1e} at x={x}")
    vecs = _eta_normalize_columns(vecs, model.eta)
    a_full = _conjugated_fields(model, x, vecs)
    a = np.einsum("aii->ai", a_full)
    # descending joint-tuple order: (Re a_1, Im a_1, Re a_2, Im a_2, ...);
    # keys are quantized so roundoff-level near-ties fall through to the next
    # component instead of being ordered by noise
    keys = []
    for alpha in range(n):
        keys.append(-np.round(a[alpha].real, 10))
        keys.append(-np.round(a[alpha].imag, 10))
    order = np.lexsort(keys[::-1])
    vecs = _fix_signs_base(vecs[:, order])
    a = np.ascontiguousarray(a[:, order])
    if n > 1:
        offd = a_full[:, order, :][:, :, order][:, ~np.eye(n, dtype=bool)]
        res = float(np.max(np.abs(offd)))
        if res > 1e-10:
            raise EigenvalueCollision(
                f"eigenbasis ill-conditioned: off-diagonal residual {res:.3e} at x={x}")
    E = eta_orthonormal_factor(model.eta)
    return vecs, E @ vecs, a


# --------------------------------------------------------------------- #
# grid frames


@dataclass
class FrameReport:
    """Residual diagnostics of a grid frame (max over grid unless noted)."""

    offdiag_a: float
    closedness: float
    path_consistency: float
    q_antisymmetry: float
    q_antisymmetry_interior: float
    u_imag_max: float
    min_pencil_gap: float
    min_abs_det_jac: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SemisimpleFrame:
    """Continued eigenframe data over a rectangular coordinate grid."""

    model: FrobeniusModel
    axes: tuple[np.ndarray, ...]
    pts: np.ndarray           # (m1[, m2], n)
    base_idx: tuple[int, ...]
    T0_coord: np.ndarray      # (m1[, m2], n, n)
    T0: np.ndarray            # orthonormal frame, T0 T0^T = Id
    E: np.ndarray
    a: np.ndarray             # (m1[, m2], n_alpha, n) diagonal values
    u: np.ndarray             # (m1[, m2], n)
    q: np.ndarray             # (m1[, m2], n_alpha, n, n)
    inv_jac: np.ndarray       # (m1[, m2], n_alpha, n): dx^alpha / du^i
    fd_order: int
    report: FrameReport

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pts.shape[:-1]

    def spacing(self) -> tuple[float, ...]:
        return tuple(float(ax[1] - ax[0]) for ax in self.axes)


def _continue_branches(lam_raw, vecs_raw, lam_ref, vec_ref, eta):
    """Match raw eigen-branches to a reference: permutation by eigenvalue
    proximity (Hungarian assignment), then sign by maximal overlap."""
    n = lam_raw.shape[0]
    cost = np.abs(lam_raw[None, :] - lam_ref[:, None])  # rows: ref, cols: raw
    _, cols = linear_sum_assignment(cost)
    vecs = vecs_raw[:, cols]
    vecs = _eta_normalize_columns(vecs, eta)
    # sign: minimize || s v - v_ref || over s = +-1
    ov = np.einsum("ik,ik->k", vec_ref.conj(), vecs).real
    signs = np.where(ov >= 0.0, 1.0, -1.0)
    return lam_raw[cols], vecs * signs[None, :]


def _integration_orders(m: int, base: int) -> list[tuple[int, int]]:
    """Visit order (index, predecessor) covering 0..m-1 outward from base."""
    seq = []
    for i in range(base + 1, m):
        seq.append((i, i - 1))
    for i in range(base - 1, -1, -1):
        seq.append((i, i + 1))
    return seq


def build_frame(model: FrobeniusModel,
                bounds: Optional[tuple] = None,
                shape: tuple[int, ...] = (33, 33),
                collision_tol: float = 1e-8,
                path_tol: float = 1e-5,
                fd_order: int = 2,
                base_signs: Optional[tuple] = None) -> SemisimpleFrame:
    """Continue the basepoint eigenframe over a rectangular grid.

    Works for 1- and 2-dimensional models (the shipped desk-scale fixtures).
    Branch order and eigenvector signs are fixed at the grid node nearest the
    model basepoint and continued along a spanning tree (base row first, then
    each column); canonical coordinates are integrated along the same tree
    with spline-accurate quadrature, and cross-checked along the transposed
    tree (column first), raising :class:`PathInconsistency` on disagreement.

    ``base_signs`` (entries +-1) overrides the deterministic sign rule at the
    basepoint; the frame changes by constant right multiplication while the
    diagonal fields and canonical coordinates stay fixed (gauge covariance).
    """
    n = model.n
    if n > 2:
        raise NotImplementedError("grid frames are implemented for n <= 2")
    if bounds is None:
        bounds = model.domain
    if len(shape) != n:
        raise ValueError(f"shape must have {n} entries")
    axes = tuple(np.linspace(lo, hi, m) for (lo, hi), m in zip(bounds, shape))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh, axis=-1)
    grid_shape = pts.shape[:-1]

    base_idx = tuple(int(np.argmin(np.abs(ax - b))) for ax, b in zip(axes, model.basepoint))

    P = model.pencil(pts)
    lam_all, vec_all = np.linalg.eig(P)

    if n > 1:
        offd = np.abs(lam_all[..., :, None] - lam_all[..., None, :])
        iu = np.triu_indices(n, k=1)
        min_gap = float(np.min(offd[..., iu[0], iu[1]]))
        if min_gap < collision_tol:
            raise EigenvalueCollision(
                f"pencil eigenvalue gap {min_gap:.3e} below {collision_tol:.1e} on the grid")
    else:
        min_gap = float("inf")

    # basepoint: canonical order + signs
    Tc = np.empty(grid_shape + (n, n), dtype=np.complex128)
    lam = np.empty(grid_shape + (n,), dtype=np.complex128)
    vb, _, _ = eigenframe_at(model, pts[base_idx], collision_tol=collision_tol)
    if base_signs is not None:
        vb = vb * np.asarray(base_signs, dtype=float)[None, :]
    Tc[base_idx] = vb
    # pencil eigenvalue on each ordered branch, from the Rayleigh quotient
    Pb = model.pencil(pts[base_idx])
    eta_c = model.eta.astype(np.complex128)
    lam[base_idx] = (np.einsum("ik,ij,jl,lk->k", vb, eta_c, Pb, vb)
                     / np.einsum("ik,ij,jk->k", vb, eta_c, vb))

    def visit(idx, pred):
        lr, vr = _continue_branches(lam_all[idx], vec_all[idx], lam[pred], Tc[pred], model.eta)
        lam[idx] = lr
        Tc[idx] = vr

    if n == 1:
        for i, p in _integration_orders(shape[0], base_idx[0]):
            visit((i,), (p,))
    else:
        bi, bj = base_idx
        for i, p in _integration_orders(shape[0], bi):
            visit((i, bj), (p, bj))
        for i in range(shape[0]):
            for j, p in _integration_orders(shape[1], bj):
                visit((i, j), (i, p))

    # diagonal fields a_alpha^i and their off-diagonal residual (true inverse:
    # evolved tabulations need not be eta-symmetric, see _conjugated_fields)
    C = model.C(pts)  # (..., n_alpha, n, n)
    Tc_inv = np.linalg.inv(Tc)
    a_full = np.einsum("...ik,...akl,...lj->...aij", Tc_inv, C.astype(np.complex128), Tc)
    eye = np.eye(n, dtype=bool)
    offdiag_a = float(np.max(np.abs(a_full[..., ~eye]))) if n > 1 else 0.0
    a = np.einsum("...aii->...ai", a_full)

    # canonical coordinates by spline-accurate path integration along two trees
    u_rowfirst = _integrate_u(axes, a, base_idx, order=("rows", "cols"))
    if n == 2:
        u_colfirst = _integrate_u(axes, a, base_idx, order=("cols", "rows"))
        path_res = float(np.max(np.abs(u_rowfirst - u_colfirst)))
        if path_res > path_tol:
            raise PathInconsistency(
                f"u integration paths disagree by {path_res:.3e} (tol {path_tol:.1e}); "
                "the coordinate differentials are not closed on this grid")
    else:
        path_res = 0.0
    u = u_rowfirst

    # closedness residual of the differentials du^i = a_alpha^i dx^alpha
    if n == 2:
        h1, h2 = (float(ax[1] - ax[0]) for ax in axes)
        d2_a1 = fd_derivative(a[..., 0, :], h2, axis=1, order=2)
        d1_a2 = fd_derivative(a[..., 1, :], h1, axis=0, order=2)
        closedness = float(np.max(np.abs(d2_a1 - d1_a2)))
    else:
        closedness = 0.0

    # orthonormal frame and rotation coefficients
    E = eta_orthonormal_factor(model.eta)
    T0 = np.einsum("ij,...jk->...ik", E, Tc)
    q = np.empty(grid_shape + (n, n, n), dtype=np.complex128)
    for alpha in range(n):
        h = float(axes[alpha][1] - axes[alpha][0])
        dT = fd_derivative(T0, h, axis=alpha, order=fd_order)
        q[..., alpha, :, :] = np.linalg.solve(T0, dT)

    anti = np.abs(q + np.swapaxes(q, -1, -2))
    q_anti = float(np.max(anti))
    interior = anti[(slice(2, -2),) * len(grid_shape)]
    q_anti_int = float(np.max(interior)) if interior.size else q_anti

    jac = np.swapaxes(a, -1, -2)  # J[i, alpha] = a_alpha^i
    det = np.linalg.det(jac)
    inv_jac = np.linalg.inv(jac)

    report = FrameReport(
        offdiag_a=offdiag_a,
        closedness=closedness,
        path_consistency=path_res,
        q_antisymmetry=q_anti,
        q_antisymmetry_interior=q_anti_int,
        u_imag_max=float(np.max(np.abs(u.imag))),
        min_pencil_gap=min_gap,
        min_abs_det_jac=float(np.min(np.abs(det))),
    )
    return SemisimpleFrame(
        model=model, axes=axes, pts=pts, base_idx=base_idx,
        T0_coord=Tc, T0=T0, E=E, a=a, u=u, q=q, inv_jac=inv_jac,
        fd_order=fd_order, report=report,
    )


def _integrate_u(axes, a, base_idx, order) -> np.ndarray:
    """Path-integrate du^i = a_alpha^i dx^alpha from the base node.

    Each 1-D leg uses the antiderivative of a cubic spline through the
    sampled integrand (O(h^4)), so the two integration orders agree to the
    same order as the closedness of the differentials allows.
    """
    n = a.shape[-1]
    if len(axes) == 1:
        (ax,) = axes
        u = np.empty(a.shape[:-2] + (n,), dtype=np.complex128)
        for i in range(n):
            u[..., i] = _cumulative_from(ax, a[..., 0, i], axes[0][base_idx[0]])
        return u

    ax1, ax2 = axes
    bi, bj = base_idx
    m1, m2 = len(ax1), len(ax2)
    u = np.empty((m1, m2, n), dtype=np.complex128)
    for i in range(n):
        if order == ("rows", "cols"):
            base_row = _cumulative_from(ax1, a[:, bj, 0, i], ax1[bi])      # (m1,)
            cols = np.empty((m1, m2), dtype=np.complex128)
            for k in range(m1):
                cols[k] = _cumulative_from(ax2, a[k, :, 1, i], ax2[bj])
            u[..., i] = base_row[:, None] + cols
        else:
            base_col = _cumulative_from(ax2, a[bi, :, 1, i], ax2[bj])      # (m2,)
            rows = np.empty((m1, m2), dtype=np.complex128)
            for k in range(m2):
                rows[:, k] = _cumulative_from(ax1, a[:, k, 0, i], ax1[bi])
            u[..., i] = base_col[None, :] + rows
    return u


def _cumulative_from(x: np.ndarray, f: np.ndarray, x0: float) -> np.ndarray:
    """Antiderivative of spline(f) vanishing at x0, evaluated at the nodes."""
    sp = CubicSpline(x, f)
    anti = sp.antiderivative()
    return anti(x) - anti(x0)


# --------------------------------------------------------------------- #
# u-frame resampling


@dataclass
class UFrameReport:
    qi_commutator: float       # max |[q_i, e_j] - [q_j, e_i]|
    Q_symmetry: float          # max |Q - Q^T|
    reconstruction: float      # max |q_i - [e_i, Q]|
    newton_residual: float     # worst |u(x(u)) - u_target|
    fd_chain_consistency: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class UFrame:
    """Rotation-coefficient fields resampled to a rectangular canonical grid."""

    model: FrobeniusModel
    u_axes: tuple[np.ndarray, ...]
    x_of_u: np.ndarray         # (M1, M2, n) preimages
    q_i: np.ndarray            # (M1, M2, n_i, n, n)
    Q: np.ndarray              # (M1, M2, n, n) symmetric, zero diagonal
    report: UFrameReport

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def shape(self) -> tuple[int, ...]:
        return self.x_of_u.shape[:-1]

    def spacing(self) -> tuple[float, ...]:
        return tuple(float(ax[1] - ax[0]) for ax in self.u_axes)


def _invert_map(sp_u, targets, samples_u, samples_x, box, newton_tol):
    """Newton-invert the two-component spline map at each target point.

    Iterates are confined to ``box``; returns the preimages, the worst forward
    residual, and whether any solution finished within one grid-step safety
    margin of the box boundary (a sign the target lies outside the image).
    """
    (x1_lo, x1_hi), (x2_lo, x2_hi) = box
    margin = 1e-9 * max(x1_hi - x1_lo, x2_hi - x2_lo)
    xs = np.empty_like(targets)
    worst = 0.0
    clipped = False
    for row, ut in enumerate(targets):
        k = int(np.argmin(np.sum((samples_u - ut) ** 2, axis=1)))
        x = samples_x[k].copy()
        for _ in range(50):
            val = np.array([sp_u[0](x[0], x[1], grid=False),
                            sp_u[1](x[0], x[1], grid=False)])
            r = val - ut
            if np.max(np.abs(r)) < newton_tol:
                break
            J = np.array([[sp_u[0](x[0], x[1], dx=1, grid=False),
                           sp_u[0](x[0], x[1], dy=1, grid=False)],
                          [sp_u[1](x[0], x[1], dx=1, grid=False),
                           sp_u[1](x[0], x[1], dy=1, grid=False)]])
            x = x - np.linalg.solve(J, r)
            x[0] = np.clip(x[0], x1_lo, x1_hi)
            x[1] = np.clip(x[1], x2_lo, x2_hi)
        val = np.array([sp_u[0](x[0], x[1], grid=False), sp_u[1](x[0], x[1], grid=False)])
        worst = max(worst, float(np.max(np.abs(val - ut))))
        if (x[0] - x1_lo < margin or x1_hi - x[0] < margin
                or x[1] - x2_lo < margin or x2_hi - x[1] < margin):
            clipped = True
        xs[row] = x
    return xs, worst, clipped


def _field_splines(ax1, ax2, field):
    """Quintic spline models (re, im) of every entry of a complex grid field."""
    flat = field.reshape(field.shape[0], field.shape[1], -1)
    out = []
    for k in range(flat.shape[-1]):
        out.append((RectBivariateSpline(ax1, ax2, flat[..., k].real, kx=5, ky=5),
                    RectBivariateSpline(ax1, ax2, flat[..., k].imag, kx=5, ky=5)))
    return out, field.shape[2:]


def _eval_splines(splines, shape, x1, x2):
    vals = [sr(x1, x2, grid=False) + 1j * si(x1, x2, grid=False) for sr, si in splines]
    return np.stack(vals, axis=-1).reshape(x1.shape + shape)


def to_u_frame(frame: SemisimpleFrame,
               shape: tuple[int, int] = (33, 33),
               shrink: float = 0.5,
               trim: int = 2,
               newton_tol: float = 1e-12) -> UFrame:
    """Resample the rotation coefficients onto a rectangular u-grid.

    The target rectangle is centered on the image of the basepoint with half
    the (per-axis) spread of the mapped interior grid, scaled by ``shrink``;
    every node is pulled back through Newton inversion of spline models of
    ``u(x)`` fitted on the interior of the x-grid (``trim`` boundary rings
    dropped, where one-sided stencils would degrade the q fields).
    """
    if frame.n != 2:
        raise NotImplementedError("u-frames are implemented for n = 2")
    sl = (slice(trim, -trim if trim else None),) * 2
    ax1 = frame.axes[0][sl[0]]
    ax2 = frame.axes[1][sl[1]]
    u_int = frame.u[sl]
    if np.max(np.abs(u_int.imag)) > 1e-8:
        raise ValueError("canonical coordinates have a non-negligible imaginary part; "
                         "u-grid resampling assumes a real map")
    u_re = u_int.real

    sp_u = [RectBivariateSpline(ax1, ax2, u_re[..., i], kx=5, ky=5) for i in range(2)]
    q_splines, q_shape = _field_splines(ax1, ax2, frame.q[sl])
    a_splines, a_shape = _field_splines(ax1, ax2, frame.a[sl])

    u_base = frame.u[frame.base_idx].real
    lo = u_re.reshape(-1, 2).min(axis=0)
    hi = u_re.reshape(-1, 2).max(axis=0)
    samples_u = u_re.reshape(-1, 2)
    samples_x = frame.pts[sl].reshape(-1, 2)
    box = ((ax1[0], ax1[-1]), (ax2[0], ax2[-1]))

    # inscribe the target rectangle: start from the shrunk bounding box of the
    # mapped interior and contract until every node Newton-inverts strictly
    # inside the x-grid
    half = shrink * 0.5 * (hi - lo)
    u_axes = None
    xs = worst = None
    for _ in range(12):
        cand_axes = tuple(np.linspace(u_base[i] - half[i], u_base[i] + half[i], shape[i])
                          for i in range(2))
        targets = np.stack(np.meshgrid(*cand_axes, indexing="ij"), axis=-1).reshape(-1, 2)
        xs, worst, clipped = _invert_map(sp_u, targets, samples_u, samples_x, box, newton_tol)
        if worst < 1e-9 and not clipped:
            u_axes = cand_axes
            break
        half = half * 0.8
    if u_axes is None:
        raise PathInconsistency(
            f"u-grid inversion failed even after shrinking (worst residual {worst:.3e}); "
            "the canonical map may fold inside the requested region")

    x1t, x2t = xs[:, 0], xs[:, 1]
    q_at = _eval_splines(q_splines, q_shape, x1t, x2t)     # (M, n_a, n, n)
    a_at = _eval_splines(a_splines, a_shape, x1t, x2t)     # (M, n_a, n)

    jac = np.swapaxes(a_at, -1, -2)                        # J[i, alpha]
    inv_jac = np.linalg.inv(jac)                           # [alpha, i]
    q_i = np.einsum("...ai,...ajk->...ijk", inv_jac, q_at)

    M1, M2 = shape
    n = 2
    q_i = q_i.reshape(M1, M2, n, n, n)
    x_of_u = xs.reshape(M1, M2, 2)

    # potential Q: off-diagonal rows of q_i
    Q = np.zeros((M1, M2, n, n), dtype=np.complex128)
    for i in range(n):
        for j in range(n):
            if i != j:
                Q[..., i, j] = q_i[..., i, i, j]

    # residuals
    e = [np.zeros((n, n)) for _ in range(n)]
    for i in range(n):
        e[i][i, i] = 1.0
    comm_res = 0.0
    for i in range(n):
        for j in range(n):
            lhs = q_i[..., i, :, :] @ e[j] - e[j] @ q_i[..., i, :, :]
            rhs = q_i[..., j, :, :] @ e[i] - e[i] @ q_i[..., j, :, :]
            comm_res = max(comm_res, float(np.max(np.abs(lhs - rhs))))
    q_sym = float(np.max(np.abs(Q - np.swapaxes(Q, -1, -2))))
    recon = 0.0
    for i in range(n):
        lie = e[i] @ Q - Q @ e[i]
        recon = max(recon, float(np.max(np.abs(q_i[..., i, :, :] - lie))))

    # grid quality: FD of q_1 on the u-grid vs the chain rule through x
    # (d/du^1 = sum_alpha inv_jac[alpha, 1] d/dx^alpha, applied to the
    # product q_i = inv_jac . q_alpha including the jacobian variation)
    h_u = float(u_axes[0][1] - u_axes[0][0])
    fd_u = fd_derivative(q_i, h_u, axis=0, order=4)

    def _d(splines, sh, dx, dy):
        return _eval_splines([(s[0].partial_derivative(dx, dy),
                               s[1].partial_derivative(dx, dy)) for s in splines],
                             sh, x1t, x2t)

    dq_dx = np.stack([_d(q_splines, q_shape, 1, 0), _d(q_splines, q_shape, 0, 1)],
                     axis=-4)                       # (M, beta, alpha, n, n)
    da_dx = np.stack([_d(a_splines, a_shape, 1, 0), _d(a_splines, a_shape, 0, 1)],
                     axis=-3)                       # (M, beta, alpha, i)
    dir_u0 = inv_jac[..., :, 0]                     # dx^beta/du^1, (M, beta)
    dq_du = np.einsum("...b,...bajk->...ajk", dir_u0, dq_dx)
    dJ_du = np.swapaxes(np.einsum("...b,...bai->...ai", dir_u0, da_dx), -1, -2)
    dinv_du = -inv_jac @ dJ_du @ inv_jac
    chain = (np.einsum("...ai,...ajk->...ijk", dinv_du, q_at)
             + np.einsum("...ai,...ajk->...ijk", inv_jac, dq_du))
    chain = chain.reshape(M1, M2, n, n, n)
    fd_cons = float(np.max(np.abs((fd_u - chain)[2:-2, 2:-2])))

    report = UFrameReport(
        qi_commutator=comm_res,
        Q_symmetry=q_sym,
        reconstruction=recon,
        newton_residual=worst,
        fd_chain_consistency=fd_cons,
    )
    return UFrame(model=frame.model, u_axes=u_axes, x_of_u=x_of_u,
                  q_i=q_i, Q=Q, report=report)
