"""Small dense linear-algebra helpers shared across the package.

Vectors are 1-D float64 numpy arrays. A basis is any sequence of equal-length
vectors (or a 2-D array whose rows are the vectors).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

RANK_TOL = 1e-10


def as_vec(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def dot(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.dot(a, b))


def l2_norm(a) -> float:
    return float(np.sqrt(np.dot(as_vec(a), as_vec(a))))


def _basis_matrix(basis: Sequence | np.ndarray) -> np.ndarray:
    B = np.atleast_2d(np.asarray(basis, dtype=np.float64))
    if B.size == 0:
        raise ValueError("basis must be nonempty")
    if not np.all(np.isfinite(B)):
        raise ValueError("basis contains non-finite entries")
    return B


def orthonormalize(basis, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal rows spanning the same subspace as ``basis``.

    Modified Gram-Schmidt with one re-orthogonalization pass. A vector whose
    residual falls below ``tol * max_norm`` is treated as linearly dependent
    and dropped, so the result may have fewer rows than the input.
    """
    B = _basis_matrix(basis)
    scale = float(np.max(np.linalg.norm(B, axis=1)))
    if scale == 0.0:
        return np.zeros((0, B.shape[1]))
    q: list[np.ndarray] = []
    for v in B:
        r = v.copy()
        for _ in range(2):
            for u in q:
                r -= np.dot(u, r) * u
        n = np.linalg.norm(r)
        if n > tol * scale:
            q.append(r / n)
    if not q:
        return np.zeros((0, B.shape[1]))
    return np.vstack(q)


def project_span(w, basis) -> np.ndarray:
    w = as_vec(w)
    Q = orthonormalize(basis)
    if Q.shape[1] != w.shape[0]:
        raise ValueError(f"dimension mismatch: basis dim {Q.shape[1]} vs {w.shape[0]}")
    # two passes for the same reason MGS re-orthogonalizes
    p = Q.T @ (Q @ w)
    p += Q.T @ (Q @ (w - p))
    return p


def project_orth_complement(w, basis) -> np.ndarray:
    """Component of ``w`` orthogonal to ``span(basis)``."""
    w = as_vec(w)
    return w - project_span(w, basis)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_vec(x).copy()
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        xi = x[i]
        x[i] = xi + h
        fp = f(x)
        x[i] = xi - h
        fm = f(x)
        x[i] = xi
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
