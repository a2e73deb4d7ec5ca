"""Rounding of nonnegative matrices onto the transport polytope U(a, b)."""

from __future__ import annotations

import numpy as np

from .core import DiscreteMeasure, TransportPlan

BALANCE_TOL = 1e-10
ZERO_ERROR_TOL = 1e-14


def _scale(target: np.ndarray, sums: np.ndarray) -> np.ndarray:
    # min(target / sums, 1), with factor 1 on empty lines
    out = np.ones_like(sums)
    nz = sums > 0
    out[nz] = np.minimum(target[nz] / sums[nz], 1.0)
    return out


def round_to_polytope(X, a, b) -> TransportPlan:
    """Return Y in U(a, b) close to X.

    Rows are first scaled down to at most ``a``, then columns to at most
    ``b``; the remaining deficits ``err_r``, ``err_c`` are filled by the
    rank-one matrix ``err_r err_c^T / ||err_r||_1``. The output satisfies
    ``||Y - X||_1 <= 2 (||X 1 - a||_1 + ||X^T 1 - b||_1)``.

    Parameters
    ----------
    X : TransportPlan or array_like
        Nonnegative n x m matrix.
    a, b : DiscreteMeasure or array_like
        Target marginals with equal totals.

    Returns
    -------
    TransportPlan
    """
    X = X.entries if isinstance(X, TransportPlan) else np.asarray(X, dtype=np.float64)
    a = a.weights if isinstance(a, DiscreteMeasure) else np.asarray(a, dtype=np.float64)
    b = b.weights if isinstance(b, DiscreteMeasure) else np.asarray(b, dtype=np.float64)
    if X.shape != (a.size, b.size):
        raise ValueError(f"shape {X.shape} does not match marginals ({a.size}, {b.size})")
    if np.any(X < 0) or np.any(np.isnan(X)):
        raise ValueError("X must be nonnegative")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be nonnegative")
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > BALANCE_TOL * max(sa, sb, 1.0):
        raise ValueError(f"unbalanced marginals: sum(a)={sa!r}, sum(b)={sb!r}")

    X1 = X * _scale(a, X.sum(axis=1))[:, None]
    X2 = X1 * _scale(b, X1.sum(axis=0))[None, :]
    err_r = np.maximum(a - X2.sum(axis=1), 0.0)
    err_c = np.maximum(b - X2.sum(axis=0), 0.0)
    norm = err_r.sum()
    if norm <= ZERO_ERROR_TOL:
        # nothing left to fill (err_c has the same total up to the balance tolerance)
        return TransportPlan(X2)
    return TransportPlan(X2 + np.outer(err_r, err_c) / norm)
