"""Frobenius-manifold fixtures: structure constants, metric, axiom checks.

A :class:`FrobeniusModel` packages the flat metric ``eta``, the multiplication
operators ``C_alpha(x)`` (matrices of the structure constants), the components
of the unit vector field, a coordinate box on which the structure is
semisimple, and -- where available -- analytic ``x``-derivatives of ``C`` and
the generating potential.  Everything is vectorized over leading axes of the
evaluation points.

Axioms checked on sample grids (max residual each):

1. unit:            ``sum_alpha e^alpha C_alpha = Id``
2. commutativity:   ``[C_alpha, C_beta] = 0``
3. lower symmetry:  ``(C_alpha) e_beta = (C_beta) e_alpha`` (columns swap)
4. eta-symmetry:    ``eta C_alpha`` symmetric
5. semisimplicity:  simple spectrum of a fixed generic pencil (reported as the
                    minimal eigenvalue gap, together with the gap of ``C_2``)
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "FrobeniusModel",
    "AxiomReport",
    "fixture",
    "available_fixtures",
    "box_grid",
    "pencil_weights",
]

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def pencil_weights(n: int) -> np.ndarray:
    """Fixed generic coefficients for the pencil ``sum_alpha c_alpha C_alpha``.

    Powers of the golden ratio keep the pencil's spectrum simple whenever any
    member of the family separates the common eigenvectors, without any
    run-to-run randomness.
    """
    return _GOLDEN ** np.arange(n)


@dataclass(frozen=True)
class FrobeniusModel:
    """Semisimple Frobenius structure in flat coordinates."""

    name: str
    n: int
    eta: np.ndarray
    unit: np.ndarray
    domain: tuple[tuple[float, float], ...]
    basepoint: np.ndarray
    eval_C: Callable[[np.ndarray], np.ndarray]          # (..., n) -> (..., n, n, n)
    eval_dC: Optional[Callable[[np.ndarray], np.ndarray]] = None  # (..., n, n, n, n)
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def C(self, x) -> np.ndarray:
        """All multiplication operators at ``x``: ``out[..., a, :, :] = C_a``."""
        return self.eval_C(np.asarray(x, dtype=float))

    def C_single(self, x, alpha: int) -> np.ndarray:
        """One operator ``C_alpha`` (0-based index)."""
        return self.C(x)[..., alpha, :, :]

    def pencil(self, x) -> np.ndarray:
        """The fixed generic pencil ``sum_alpha c_alpha C_alpha(x)``."""
        w = pencil_weights(self.n)
        return np.einsum("a,...aij->...ij", w, self.C(x))

    def default_axiom_grid(self, per_axis: int = 9) -> np.ndarray:
        return box_grid(self.domain, per_axis)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        lo = np.array([b[0] for b in self.domain])
        hi = np.array([b[1] for b in self.domain])
        return bool(np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12))


def box_grid(bounds: tuple[tuple[float, float], ...], per_axis: int | tuple[int, ...]) -> np.ndarray:
    """Rectangular sample grid over a box; returns shape (m_1, ..., m_n, n)."""
    if isinstance(per_axis, int):
        per_axis = (per_axis,) * len(bounds)
    axes = [np.linspace(lo, hi, m) for (lo, hi), m in zip(bounds, per_axis)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)


# --------------------------------------------------------------------- #
# fixtures


def _trivial_diag(n: int) -> FrobeniusModel:
    """Product of ``n`` trivial one-dimensional algebras in idempotent coordinates.

    ``C_alpha`` is the matrix unit ``e_alpha``; the unit vector field is the
    sum of all coordinate directions; ``eta = Id``.
    """
    units = np.zeros((n, n, n))
    for a in range(n):
        units[a, a, a] = 1.0

    def eval_C(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(units, x.shape[:-1] + (n, n, n)).copy()

    def eval_dC(x: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[:-1] + (n, n, n, n))

    def potential(x: np.ndarray) -> np.ndarray:
        return np.sum(x ** 3, axis=-1) / 6.0

    return FrobeniusModel(
        name=f"trivial_diag({n})",
        n=n,
        eta=np.eye(n),
        unit=np.ones(n),
        domain=tuple((-1.0, 1.0) for _ in range(n)),
        basepoint=np.zeros(n),
        eval_C=eval_C,
        eval_dC=eval_dC,
        potential=potential,
    )


def _qh_p1() -> FrobeniusModel:
    """Two-dimensional structure with ``C_2 = [[0, exp(x2)], [1, 0]]``."""
    eta = np.array([[0.0, 1.0], [1.0, 0.0]])

    def eval_C(x: np.ndarray) -> np.ndarray:
        x2 = x[..., 1]
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = 1.0
        out[..., 0, 1, 1] = 1.0
        out[..., 1, 0, 1] = np.exp(x2)
        out[..., 1, 1, 0] = 1.0
        return out

    def eval_dC(x: np.ndarray) -> np.ndarray:
        x2 = x[..., 1]
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 1, 1, 0, 1] = np.exp(x2)  # d/dx2 of C_2
        return out

    def potential(x: np.ndarray) -> np.ndarray:
        return 0.5 * x[..., 0] ** 2 * x[..., 1] + np.exp(x[..., 1])

    return FrobeniusModel(
        name="qh_p1",
        n=2,
        eta=eta,
        unit=np.array([1.0, 0.0]),
        domain=((-1.0, 1.0), (-1.0, 1.0)),
        basepoint=np.zeros(2),
        eval_C=eval_C,
        eval_dC=eval_dC,
        potential=potential,
    )


def _a2_poly() -> FrobeniusModel:
    """Two-dimensional polynomial structure with a caustic along ``x2 = 0``.

    ``C_2 = [[0, x2/3], [1, 0]]``; the declared box keeps ``x2 >= 0.5`` so the
    spectrum stays simple.  Evaluation outside the box is permitted (needed by
    the caustic error-path tests) -- only grid preconditions use the box.
    """
    eta = np.array([[0.0, 1.0], [1.0, 0.0]])

    def eval_C(x: np.ndarray) -> np.ndarray:
        x2 = x[..., 1]
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, 0, 0] = 1.0
        out[..., 0, 1, 1] = 1.0
        out[..., 1, 0, 1] = x2 / 3.0
        out[..., 1, 1, 0] = 1.0
        return out

    def eval_dC(x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[:-1] + (2, 2, 2, 2))
        out[..., 1, 1, 0, 1] = 1.0 / 3.0
        return out

    def potential(x: np.ndarray) -> np.ndarray:
        return 0.5 * x[..., 0] ** 2 * x[..., 1] + x[..., 1] ** 4 / 72.0

    return FrobeniusModel(
        name="a2_poly",
        n=2,
        eta=eta,
        unit=np.array([1.0, 0.0]),
        domain=((-1.0, 1.0), (0.5, 1.5)),
        basepoint=np.array([0.0, 1.0]),
        eval_C=eval_C,
        eval_dC=eval_dC,
        potential=potential,
    )


_TRIVIAL_RE = re.compile(r"^trivial_diag\((\d+)\)$")


def fixture(name: str) -> FrobeniusModel:
    """Look up a fixture by its CLI name: trivial_diag(n), qh_p1, a2_poly."""
    m = _TRIVIAL_RE.match(name.strip())
    if m:
        n = int(m.group(1))
        if n < 1:
            raise ValueError("trivial_diag needs n >= 1")
        return _trivial_diag(n)
    if name.strip() == "qh_p1":
        return _qh_p1()
    if name.strip() == "a2_poly":
        return _a2_poly()
    raise KeyError(f"unknown fixture {name!r}; available: {available_fixtures()}")


def available_fixtures() -> list[str]:
    return ["trivial_diag(n)", "qh_p1", "a2_poly"]


# --------------------------------------------------------------------- #
# axiom checks


@dataclass
class AxiomReport:
    """Max residuals of axioms 1-4 and the semisimplicity margins (axiom 5)."""

    model: str
    points: int
    unit: float
    commutativity: float
    lower_symmetry: float
    eta_symmetry: float
    eig_gap_c2: float
    eig_gap_pencil: float

    def residuals(self) -> dict[str, float]:
        return {
            "unit": self.unit,
            "commutativity": self.commutativity,
            "lower_symmetry": self.lower_symmetry,
            "eta_symmetry": self.eta_symmetry,
        }

    def as_dict(self) -> dict:
        d = {"model": self.model, "points": self.points}
        d.update(self.residuals())
        d["eig_gap_c2"] = self.eig_gap_c2
        d["eig_gap_pencil"] = self.eig_gap_pencil
        return d


def _min_gap(vals: np.ndarray) -> float:
    """Smallest pairwise distance among eigenvalues, minimized over points."""
    n = vals.shape[-1]
    if n < 2:
        return float("inf")
    v = vals.reshape(-1, n)
    diffs = np.abs(v[:, :, None] - v[:, None, :])
    iu = np.triu_indices(n, k=1)
    return float(np.min(diffs[:, iu[0], iu[1]]))


def check_axioms(model: FrobeniusModel, grid: np.ndarray | None = None) -> AxiomReport:
    """Evaluate the structure axioms on a grid of points (report-only)."""
    if grid is None:
        grid = model.default_axiom_grid()
    pts = np.asarray(grid, dtype=float).reshape(-1, model.n)
    C = model.C(pts)  # (N, n, n, n)
    n = model.n

    unit_op = np.einsum("a,xaij->xij", model.unit, C)
    r_unit = float(np.max(np.abs(unit_op - np.eye(n))))

    comm = np.einsum("xaij,xbjk->xabik", C, C)
    r_comm = float(np.max(np.abs(comm - np.swapaxes(comm, 1, 2)))) if n > 1 else 0.0

    # (C_a) e_b = (C_b) e_a  <=>  C[x, a, :, b] symmetric under a <-> b
    r_lower = float(np.max(np.abs(C - np.swapaxes(C, 1, 3)))) if n > 1 else 0.0

    etaC = np.einsum("ij,xajk->xaik", model.eta, C)
    r_eta = float(np.max(np.abs(etaC - np.swapaxes(etaC, -1, -2))))

    if n >= 2:
        gap_c2 = _min_gap(np.linalg.eigvals(C[:, 1, :, :]))
    else:
        gap_c2 = float("inf")
    gap_pencil = _min_gap(np.linalg.eigvals(model.pencil(pts)))

    return AxiomReport(
        model=model.name,
        points=pts.shape[0],
        unit=r_unit,
        commutativity=r_comm,
        lower_symmetry=r_lower,
        eta_symmetry=r_eta,
        eig_gap_c2=gap_c2,
        eig_gap_pencil=gap_pencil,
    )
