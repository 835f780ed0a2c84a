"""Dressing, Lax flows and Hodge-pairing checks for semisimple Frobenius manifolds.

Subpackage map:

* :mod:`froblax.series`    -- truncated matrix Laurent series in ``hbar``
* :mod:`froblax.models`    -- Frobenius-manifold fixtures and axiom checks
* :mod:`froblax.reduction` -- canonical coordinates, eigenframes, rotation coefficients
* :mod:`froblax.dressing`  -- order-by-order normal-form dressing (loop and grid)
* :mod:`froblax.flows`     -- commuting Lax flows, conserved quantities, Poisson brackets
* :mod:`froblax.hodge`     -- fundamental solutions, twisted pairing, symbol map
* :mod:`froblax.cli`       -- command-line harness (``froblax`` entry point)
"""

__version__ = "0.1.0"
