"""Class-specific soft feature masks and masked feature-overlap diagnostics.

For class ``k`` the mask ``v = sigmoid(u)`` over split features is fitted so the
head classifies the masked features ``S_a(x) * v`` as ``k`` while the
complement ``S_a(x) * (1 - v)`` loses that evidence.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Network, cross_entropy, features_at, head_backward, head_forward


@dataclass(frozen=True)
class MaskFitConfig:
    steps: int = 500
    learning_rate: float = 0.05
    init_logit: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass(frozen=True, eq=False)
class ClassMask:
    class_id: int
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim != 1 or np.any(v < 0) or np.any(v > 1):
            raise ValueError("mask entries must lie in [0, 1]")
        object.__setattr__(self, "v", v)

    @classmethod
    def ones(cls, class_id: int, dim: int) -> "ClassMask":
        return cls(class_id, np.ones(dim))


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def mask_objective(net: Network, F: np.ndarray, labels, v: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean masked CE minus mean complement CE, and its gradient w.r.t. ``v``.

    ``F`` holds precomputed split features, one row per clean sample.
    """
    L_in, G_in = cross_entropy(head_forward(net, F * v), labels)
    L_out, G_out = cross_entropy(head_forward(net, F * (1.0 - v)), labels)
    _, dF_in = head_backward(net, F * v, G_in)
    _, dF_out = head_backward(net, F * (1.0 - v), G_out)
    grad_v = np.sum(dF_in * F, axis=0) + np.sum(dF_out * F, axis=0)
    return L_in - L_out, grad_v


def _fit(net: Network, F: np.ndarray, labels: np.ndarray, cfg: MaskFitConfig) -> tuple[np.ndarray, dict]:
    d = F.shape[1]
    if d == 0:
        raise ValueError("zero feature dimension")
    u = np.full(d, float(cfg.init_logit))
    m = np.zeros(d)
    s = np.zeros(d)
    b1, b2, eps = 0.9, 0.999, 1e-8
    v = _sigmoid(u)
    init_obj, _ = mask_objective(net, F, labels, v)
    best_obj, best_v = init_obj, v
    for t in range(1, cfg.steps + 1):
        obj, gv = mask_objective(net, F, labels, v)
        if obj < best_obj:
            best_obj, best_v = obj, v
        g = gv * v * (1.0 - v)
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        u = u - cfg.learning_rate * (m / (1 - b1 ** t)) / (np.sqrt(s / (1 - b2 ** t)) + eps)
        v = _sigmoid(u)
    obj, _ = mask_objective(net, F, labels, v)
    if obj < best_obj:
        best_obj, best_v = obj, v
    return best_v, {"objective": float(best_obj), "initial_objective": float(init_obj)}


def fit_class_mask(net: Network, Dk, k: int, cfg: MaskFitConfig = MaskFitConfig(),
                   return_info: bool = False):
    """Fit the soft intrinsic-feature mask of class ``k`` from its clean samples ``Dk``.

    The returned mask is the best iterate seen, so its objective never exceeds
    the objective at initialization.
    """
    Dk = np.atleast_2d(np.asarray(Dk, dtype=np.float64))
    if Dk.shape[0] < 1:
        raise ValueError("need at least one clean sample")
    F = features_at(net, Dk)
    v, info = _fit(net, F, np.full(F.shape[0], k), cfg)
    mask = ClassMask(k, v)
    return (mask, info) if return_info else mask


def fit_all_masks(net: Network, clean, cfg: MaskFitConfig = MaskFitConfig()) -> dict[int, ClassMask]:
    return {k: fit_class_mask(net, clean[k], k, cfg) for k in sorted(clean.per_class)}


def fit_global_mask(net: Network, clean, cfg: MaskFitConfig = MaskFitConfig()) -> dict[int, ClassMask]:
    """A single mask fitted on the pooled clean set, shared by every class (ablation)."""
    classes = sorted(clean.per_class)
    X = np.vstack([clean[k] for k in classes])
    y = np.concatenate([np.full(len(clean[k]), k) for k in classes])
    v, _ = _fit(net, features_at(net, X), y, cfg)
    return {k: ClassMask(k, v.copy()) for k in classes}


def masked_overlap(net: Network, mask: Optional[ClassMask], A, B) -> float:
    """Mean over pairs of ``relu(cos(S_a(a), v * S_a(b)))``; zero-norm pairs are skipped."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("overlap needs nonempty sample sets")
    FA = features_at(net, A)
    FB = features_at(net, B)
    if mask is not None:
        FB = FB * mask.v
    na = np.linalg.norm(FA, axis=1)
    nb = np.linalg.norm(FB, axis=1)
    FA, FB = FA[na > 0], FB[nb > 0]
    if FA.shape[0] == 0 or FB.shape[0] == 0:
        raise ValueError("every pair has a zero-norm feature vector")
    cos = (FA / na[na > 0, None]) @ (FB / nb[nb > 0, None]).T
    return float(np.mean(np.clip(np.maximum(cos, 0.0), 0.0, 1.0)))
