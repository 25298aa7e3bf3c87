"""Class subspace orthogonalization penalty.

For a putative target class ``t`` the penalty of a candidate input ``z`` is the
mean, over the class's clean anchors, of the rectified cosine similarity
between ``S_a(z)`` and the masked anchor features ``v_t * S_a(x_t)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .maskfit import ClassMask
from .model import Network, backward_input, features_at, forward_with_features


_SNAP = 8 * np.finfo(np.float64).eps


@dataclass(frozen=True, eq=False)
class CsoContext:
    net: Network
    class_id: int
    anchors: np.ndarray  # unit-normalized masked anchor features, one per row
    anchor_norms: np.ndarray
    rectify: bool = True

    @classmethod
    def build(cls, net: Network, mask: Optional[ClassMask], Dt, rectify: bool = True,
              class_id: Optional[int] = None) -> "CsoContext":
        """Precompute masked anchors from the clean samples ``Dt`` of the class.

        Zero-norm anchors are dropped; at least one must remain. ``mask=None``
        means an all-ones mask.
        """
        F = features_at(net, np.atleast_2d(np.asarray(Dt, dtype=np.float64)))
        if mask is not None:
            if mask.v.shape[0] != F.shape[1]:
                raise ValueError("mask dimension does not match the split feature dimension")
            F = F * mask.v
        norms = np.linalg.norm(F, axis=1)
        keep = norms > 0
        if not np.any(keep):
            raise ValueError("every anchor has zero norm")
        k = mask.class_id if class_id is None and mask is not None else class_id
        return cls(net, -1 if k is None else int(k), F[keep] / norms[keep, None], norms[keep], rectify)


class CsoTerms(NamedTuple):
    value: np.ndarray  # (n,)
    grad_features: np.ndarray  # (n, d)
    degenerate: np.ndarray  # (n,) bool; zero feature norm


def cso_from_features(ctx: CsoContext, F: np.ndarray) -> CsoTerms:
    """Penalty and its gradient w.r.t. the split features, row-wise."""
    F = np.atleast_2d(F)
    norm = np.linalg.norm(F, axis=1)
    degenerate = norm == 0.0
    safe = np.where(degenerate, 1.0, norm)
    Fh = F / safe[:, None]
    S = Fh @ ctx.anchors.T  # (n, m) cosine similarities
    # rounding can push |cos| of (anti)parallel pairs a few ulps off 1; snap it back
    S = np.where(np.abs(S) > 1.0 - _SNAP, np.sign(S), S)
    m = ctx.anchors.shape[0]
    if ctx.rectify:
        active = S > 0.0
        value = np.sum(np.where(active, S, 0.0), axis=1) / m
        abar = (active.astype(np.float64) @ ctx.anchors) / m
    else:
        value = np.mean(S, axis=1)
        abar = np.broadcast_to(np.mean(ctx.anchors, axis=0), F.shape)
    # d cos(f, a) / d f = (a_hat - cos * f_hat) / |f|
    grad = (abar - np.sum(abar * Fh, axis=1, keepdims=True) * Fh) / safe[:, None]
    value = np.where(degenerate, 0.0, value)
    grad[degenerate] = 0.0
    return CsoTerms(value, grad, degenerate)


def cso_penalty(ctx: CsoContext, z):
    """C_t(z); a scalar for a single input, an array for a batch. Degenerate inputs score 0."""
    z = np.asarray(z, dtype=np.float64)
    terms = cso_from_features(ctx, features_at(ctx.net, np.atleast_2d(z)))
    return float(terms.value[0]) if z.ndim == 1 else terms.value


def cso_penalty_grad(ctx: CsoContext, z, return_flag: bool = False):
    """Gradient of C_t w.r.t. the input; zero (with the flag set) when ``S_a(z)`` vanishes."""
    z = np.asarray(z, dtype=np.float64)
    _, F, cache = forward_with_features(ctx.net, np.atleast_2d(z))
    terms = cso_from_features(ctx, F)
    g = backward_input(ctx.net, cache, None, terms.grad_features)
    if z.ndim == 1:
        g, flag = g[0], bool(terms.degenerate[0])
    else:
        flag = terms.degenerate
    return (g, flag) if return_flag else g
