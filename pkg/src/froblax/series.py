"""Truncated matrix-valued Laurent series in a formal parameter ``hbar``.

An :class:`HSeries` stores finitely many coefficients ``A_k`` of a formal
series ``sum_k A_k hbar^k`` together with an explicit *reliability window*
``[k_min, k_max]``.  Exponents below ``k_min`` are genuinely zero (finite
pole order); exponents inside the window that are not stored are the zero
matrix; exponents above ``k_max`` are unknown (truncated).  Every operation
propagates the window conservatively, so a coefficient read off a result is
always a mathematically valid coefficient of the exact calculation:

* sum window:      ``[min(k_min), min(k_max)]``
* product window:  ``[k_min1 + k_min2, min(k_max1 + k_min2, k_min1 + k_max2)]``

Coefficients are complex ``(..., n, n)`` arrays; leading axes broadcast, so a
single HSeries can carry one matrix series per grid point.  Instances are
immutable (the coefficient arrays are frozen); all operations are pure.
"""

from __future__ import annotations

import numpy as np

__all__ = ["HSeries", "SeriesError", "LeadingCoefficientSingular"]


class SeriesError(ValueError):
    """Malformed window or incompatible operands."""


class LeadingCoefficientSingular(SeriesError):
    """series inverse requested for a series with no invertible leading term."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.complex128)
    out.flags.writeable = False
    return out


class HSeries:
    """Truncated Laurent series with matrix coefficients.

    Parameters
    ----------
    coeffs : dict[int, array_like]
        Map exponent -> coefficient, each of shape ``(..., n, n)``.
        Exactly-zero coefficients are pruned; absent means zero.
    k_min, k_max : int
        Reliability window, ``k_min <= k_max``.  Every stored exponent must
        lie inside the window.
    """

    __slots__ = ("coeffs", "k_min", "k_max", "n")

    def __init__(self, coeffs: dict[int, np.ndarray], k_min: int, k_max: int):
        if k_min > k_max:
            raise SeriesError(f"empty window [{k_min}, {k_max}]")
        self.k_min = int(k_min)
        self.k_max = int(k_max)
        frozen: dict[int, np.ndarray] = {}
        n = None
        for k in sorted(coeffs):
            a = np.asarray(coeffs[k])
            if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
                raise SeriesError(f"coefficient at {k} is not square: shape {a.shape}")
            if n is None:
                n = a.shape[-1]
            elif a.shape[-1] != n:
                raise SeriesError("inconsistent matrix sizes")
            if not (self.k_min <= k <= self.k_max):
                raise SeriesError(f"exponent {k} outside window [{k_min}, {k_max}]")
            if np.any(a != 0):
                frozen[k] = _freeze(a)
        if n is None:
            raise SeriesError("cannot infer matrix size from an empty coefficient map; "
                              "use HSeries.zero(n, ...)")
        self.coeffs = frozen
        self.n = n

    # ------------------------------------------------------------------ #
    # constructors

    @classmethod
    def zero(cls, n: int, k_min: int = 0, k_max: int = 0) -> "HSeries":
        s = cls.__new__(cls)
        s.k_min, s.k_max, s.n, s.coeffs = int(k_min), int(k_max), int(n), {}
        if s.k_min > s.k_max:
            raise SeriesError(f"empty window [{k_min}, {k_max}]")
        return s

    @classmethod
    def constant(cls, mat: np.ndarray, k_max: int, k_min: int = 0) -> "HSeries":
        """Series with the single term ``mat * hbar^0`` on window [k_min, k_max]."""
        mat = np.asarray(mat)
        s = cls({0: mat}, k_min, k_max) if np.any(mat != 0) else None
        if s is None:
            s = cls.zero(mat.shape[-1], k_min, k_max)
        return s

    @classmethod
    def identity(cls, n: int, k_max: int, k_min: int = 0) -> "HSeries":
        return cls.constant(np.eye(n), k_max, k_min)

    # ------------------------------------------------------------------ #
    # accessors

    def coeff(self, k: int) -> np.ndarray:
        """Coefficient at exponent ``k`` (zero matrix if absent in window).

        Reading outside the window raises: the value there is not reliable.
        """
        if not (self.k_min <= k <= self.k_max):
            raise SeriesError(f"exponent {k} outside reliable window "
                              f"[{self.k_min}, {self.k_max}]")
        a = self.coeffs.get(k)
        if a is None:
            shape = self._shape()
            return np.zeros(shape, dtype=np.complex128)
        return a

    def _shape(self) -> tuple[int, ...]:
        for a in self.coeffs.values():
            return a.shape
        return (self.n, self.n)

    @property
    def window(self) -> tuple[int, int]:
        return (self.k_min, self.k_max)

    def exponents(self) -> list[int]:
        return sorted(self.coeffs)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) for a in self.coeffs.values()), default=0.0)

    def per_order_max(self) -> dict[int, float]:
        return {k: float(np.max(np.abs(a))) for k, a in sorted(self.coeffs.items())}

    # ------------------------------------------------------------------ #
    # ring operations

    def add(self, other: "HSeries") -> "HSeries":
        self._check_compatible(other)
        k_min = min(self.k_min, other.k_min)
        k_max = min(self.k_max, other.k_max)
        if k_min > k_max:
            raise SeriesError("sum windows do not overlap")
        out: dict[int, np.ndarray] = {}
        for k in range(k_min, k_max + 1):
            a = self.coeffs.get(k)
            b = other.coeffs.get(k)
            if a is not None and b is not None:
                out[k] = a + b
            elif a is not None:
                out[k] = a
            elif b is not None:
                out[k] = b
        s = HSeries.zero(self.n, k_min, k_max)
        s.coeffs = {k: _freeze(v) for k, v in out.items() if np.any(v != 0)}
        return s

    def mul(self, other: "HSeries") -> "HSeries":
        """Cauchy product; matrix order is preserved (non-commutative)."""
        self._check_compatible(other)
        k_min = self.k_min + other.k_min
        k_max = min(self.k_max + other.k_min, self.k_min + other.k_max)
        out: dict[int, np.ndarray] = {}
        for i, a in self.coeffs.items():
            for j, b in other.coeffs.items():
                k = i + j
                if k_min <= k <= k_max:
                    p = a @ b
                    if k in out:
                        out[k] = out[k] + p
                    else:
                        out[k] = p
        s = HSeries.zero(self.n, k_min, k_max)
        s.coeffs = {k: _freeze(v) for k, v in out.items() if np.any(v != 0)}
        return s

    def scalar_mul(self, c: complex) -> "HSeries":
        s = HSeries.zero(self.n, self.k_min, self.k_max)
        if c != 0:
            s.coeffs = {k: _freeze(c * a) for k, a in self.coeffs.items()}
        return s

    def inverse(self, order: int) -> "HSeries":
        """Two-sided inverse through ``order`` coefficient levels.

        The input is taken as exact (coefficients beyond the stored window are
        treated as zero), which matches its use on finite dressing products
        ``(Id + hbar S_1)...(Id + hbar^K S_K)``.  If the leading stored
        coefficient ``A_0`` at effective pole order ``m`` is invertible, the
        result is ``hbar^{-m} (B_0 + ... + B_order hbar^order)`` with

            ``B_0 = A_0^{-1}``,   ``B_j = -A_0^{-1} sum_{i=1..j} A_i B_{j-i}``

        so that ``inv * self = self * inv = Id + O(hbar^{order+1 - ...})``
        on the reported window ``[-m, -m + order]``.
        """
        if order < 0:
            raise SeriesError("order must be >= 0")
        ks = self.exponents()
        if not ks:
            raise LeadingCoefficientSingular("zero series has no inverse")
        m = ks[0]
        a0 = self.coeffs[m]
        try:
            b0 = np.linalg.inv(a0)
        except np.linalg.LinAlgError as exc:
            raise LeadingCoefficientSingular("leading coefficient singular") from exc
        cond = np.linalg.cond(a0)
        if not np.all(np.isfinite(cond)):
            raise LeadingCoefficientSingular("leading coefficient singular")
        bs = [b0]
        for j in range(1, order + 1):
            acc = None
            for i in range(1, j + 1):
                ai = self.coeffs.get(m + i)
                if ai is None:
                    continue
                t = ai @ bs[j - i]
                acc = t if acc is None else acc + t
            bs.append(np.zeros_like(b0) if acc is None else -(b0 @ acc))
        s = HSeries.zero(self.n, -m, -m + order)
        s.coeffs = {-m + j: _freeze(b) for j, b in enumerate(bs) if np.any(b != 0)}
        return s

    # ------------------------------------------------------------------ #
    # projections and involutions

    def project(self, k: int, mode: str) -> "HSeries":
        """Split off the part with exponents ``>= k`` ("geq") or ``< k`` ("lt").

        Both halves keep enough window that ``geq + lt`` re-sums to the
        original on its stored window: the "lt" part is exactly zero at and
        above ``k``, so it legitimately keeps the full upper window.
        """
        if mode == "geq":
            lo = max(self.k_min, k)
            if lo > self.k_max:
                # everything reliable is below k: the part >= k is zero there
                return HSeries.zero(self.n, self.k_max, self.k_max)
            s = HSeries.zero(self.n, lo, self.k_max)
            s.coeffs = {j: a for j, a in self.coeffs.items() if j >= k}
            return s
        if mode == "lt":
            s = HSeries.zero(self.n, self.k_min, self.k_max)
            s.coeffs = {j: a for j, a in self.coeffs.items() if j < k}
            return s
        raise SeriesError(f"unknown projection mode {mode!r}")

    def bar_transpose(self) -> "HSeries":
        """The involution ``A_k -> (-1)^k A_k^T`` (an anti-homomorphism)."""
        s = HSeries.zero(self.n, self.k_min, self.k_max)
        s.coeffs = {k: _freeze(((-1) ** (k % 2)) * np.swapaxes(a, -1, -2))
                    for k, a in self.coeffs.items()}
        return s

    def shift(self, j: int) -> "HSeries":
        """Multiply by ``hbar^j`` (exponent shift)."""
        s = HSeries.zero(self.n, self.k_min + j, self.k_max + j)
        s.coeffs = {k + j: a for k, a in self.coeffs.items()}
        return s

    def clip(self, k_min: int | None = None, k_max: int | None = None) -> "HSeries":
        """Restrict the window (never widens it)."""
        lo = self.k_min if k_min is None else max(self.k_min, k_min)
        hi = self.k_max if k_max is None else min(self.k_max, k_max)
        s = HSeries.zero(self.n, lo, hi)
        s.coeffs = {k: a for k, a in self.coeffs.items() if lo <= k <= hi}
        return s

    def diag_part(self) -> "HSeries":
        s = HSeries.zero(self.n, self.k_min, self.k_max)
        eye = np.eye(self.n, dtype=bool)
        s.coeffs = {k: _freeze(np.where(eye, a, 0)) for k, a in self.coeffs.items()}
        s.coeffs = {k: a for k, a in s.coeffs.items() if np.any(a != 0)}
        return s

    def offdiag_part(self) -> "HSeries":
        s = HSeries.zero(self.n, self.k_min, self.k_max)
        eye = np.eye(self.n, dtype=bool)
        s.coeffs = {k: _freeze(np.where(eye, 0, a)) for k, a in self.coeffs.items()}
        s.coeffs = {k: a for k, a in s.coeffs.items() if np.any(a != 0)}
        return s

    # ------------------------------------------------------------------ #
    # operators

    def __add__(self, other: "HSeries") -> "HSeries":
        return self.add(other)

    def __sub__(self, other: "HSeries") -> "HSeries":
        return self.add(other.scalar_mul(-1.0))

    def __neg__(self) -> "HSeries":
        return self.scalar_mul(-1.0)

    def __matmul__(self, other: "HSeries") -> "HSeries":
        return self.mul(other)

    def __mul__(self, c):
        if isinstance(c, HSeries):
            raise SeriesError("use @ for series products, * for scalars")
        return self.scalar_mul(c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        ks = ", ".join(str(k) for k in self.exponents())
        return (f"HSeries(n={self.n}, window=[{self.k_min}, {self.k_max}], "
                f"terms at [{ks}])")

    def _check_compatible(self, other: "HSeries") -> None:
        if not isinstance(other, HSeries):
            raise SeriesError(f"expected HSeries, got {type(other).__name__}")
        if self.n != other.n:
            raise SeriesError(f"matrix sizes differ: {self.n} vs {other.n}")

    # ------------------------------------------------------------------ #
    # serialization (single matrix per exponent; no batch axes)

    def to_json_dict(self) -> dict:
        out = []
        for k in self.exponents():
            a = self.coeffs[k]
            if a.ndim != 2:
                raise SeriesError("only unbatched series serialize to JSON")
            out.append([k, a.real.tolist(), a.imag.tolist()])
        return {"n": self.n, "k_min": self.k_min, "k_max": self.k_max, "coeffs": out}

    @classmethod
    def from_json_dict(cls, d: dict) -> "HSeries":
        coeffs = {}
        for k, re, im in d["coeffs"]:
            coeffs[int(k)] = np.asarray(re, dtype=float) + 1j * np.asarray(im, dtype=float)
        s = cls.zero(int(d["n"]), int(d["k_min"]), int(d["k_max"]))
        for k, a in coeffs.items():
            if a.shape != (s.n, s.n):
                raise SeriesError("coefficient shape does not match n")
            if not (s.k_min <= k <= s.k_max):
                raise SeriesError("exponent outside window")
        s.coeffs = {k: _freeze(a) for k, a in coeffs.items() if np.any(a != 0)}
        return s


def max_abs_diff(a: HSeries, b: HSeries) -> float:
    """Largest coefficient difference on the intersection of the windows."""
    lo, hi = max(a.k_min, b.k_min), min(a.k_max, b.k_max)
    if lo > hi:
        raise SeriesError("windows do not overlap")
    worst = 0.0
    for k in range(lo, hi + 1):
        d = a.coeff(k) - b.coeff(k)
        if d.size:
            worst = max(worst, float(np.max(np.abs(d))))
    return worst
