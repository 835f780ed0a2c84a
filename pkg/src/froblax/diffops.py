"""Grid derivatives: uniform finite-difference stencils and spectral (FFT) differentiation.

``fd_derivative`` differentiates sampled fields along one axis of a uniform
grid.  ``order=2`` uses the classic central stencil with second-order
one-sided stencils at the edges; ``order=4`` uses five-point stencils
(shifted near the edges) so the truncation error is ``O(h^4)`` uniformly.

``spectral_derivative`` differentiates periodic fields via the FFT and is
exact for band-limited data.
"""

from __future__ import annotations

import numpy as np

__all__ = ["fd_derivative", "spectral_derivative", "loop_integral"]

# five-point stencil weights (times 1/h) for the first derivative at offsets
# 0..4 relative to the leftmost point, for evaluation position p = 0..4
_W4 = {
    0: np.array([-25.0 / 12.0, 4.0, -3.0, 4.0 / 3.0, -1.0 / 4.0]),
    1: np.array([-1.0 / 4.0, -5.0 / 6.0, 3.0 / 2.0, -1.0 / 2.0, 1.0 / 12.0]),
    2: np.array([1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0]),
}
_W4[3] = -_W4[1][::-1]
_W4[4] = -_W4[0][::-1]


def fd_derivative(f: np.ndarray, h: float, axis: int = 0, order: int = 2) -> np.ndarray:
    """First derivative of uniformly sampled ``f`` along ``axis``.

    Parameters
    ----------
    f : ndarray
        Samples; any shape, any dtype (complex fine).
    h : float
        Grid spacing along ``axis``.
    order : {2, 4}
        Truncation order.  Order 2 needs >= 3 points, order 4 needs >= 5.
    """
    f = np.asarray(f)
    m = f.shape[axis]
    g = np.moveaxis(f, axis, 0)
    out = np.empty_like(g)
    if order == 2:
        if m < 3:
            raise ValueError("order-2 stencils need at least 3 points")
        out[1:-1] = (g[2:] - g[:-2]) / (2.0 * h)
        out[0] = (-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * h)
        out[-1] = (3.0 * g[-1] - 4.0 * g[-2] + g[-3]) / (2.0 * h)
    elif order == 4:
        if m < 5:
            raise ValueError("order-4 stencils need at least 5 points")
        w = _W4[2]
        out[2:-2] = (w[0] * g[:-4] + w[1] * g[1:-3] + w[2] * g[2:-2]
                     + w[3] * g[3:-1] + w[4] * g[4:]) / h
        for pos, idx in ((0, 0), (1, 1), (3, m - 2), (4, m - 1)):
            w = _W4[pos]
            base = 0 if pos < 2 else m - 5
            acc = sum(w[j] * g[base + j] for j in range(5))
            out[idx] = acc / h
    else:
        raise ValueError(f"unsupported stencil order {order}")
    return np.moveaxis(out, 0, axis)


def spectral_derivative(f: np.ndarray, axis: int = 0, period: float = 2.0 * np.pi) -> np.ndarray:
    """Derivative of a periodic field by FFT along ``axis``."""
    f = np.asarray(f, dtype=np.complex128)
    m = f.shape[axis]
    k = np.fft.fftfreq(m, d=1.0 / m)  # integer wavenumbers
    if m % 2 == 0:
        k = k.copy()
        k[m // 2] = 0.0  # zero the (derivative of the) unpaired Nyquist mode
    shape = [1] * f.ndim
    shape[axis] = m
    ik = (1j * k * (2.0 * np.pi / period)).reshape(shape)
    return np.fft.ifft(np.fft.fft(f, axis=axis) * ik, axis=axis)


def loop_integral(f: np.ndarray, axis: int = 0, period: float = 2.0 * np.pi) -> np.ndarray:
    """Integral over one period of a uniformly sampled periodic field.

    The trapezoid rule on a uniform periodic grid (equivalently: the mean
    times the period), which is spectrally accurate for smooth loops.
    """
    f = np.asarray(f)
    return np.mean(f, axis=axis) * period
