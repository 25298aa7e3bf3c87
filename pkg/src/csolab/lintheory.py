"""Closed-form maximum-logit detection for linear discriminants.

Each class ``k`` has augmented training vectors ``Y_k`` (rows ``(x, 1)``) and a
weight vector that is a non-negative combination of them. The backdoor target
``t`` additionally carries ``alpha * b`` with ``b`` outside ``span(Y_t)``.

Unconstrained over the unit sphere the best logit of class ``k`` is
``||w_k||``. Restricted to the orthogonal complement of ``span(Y_k)`` it is
``||w_k - P_k w_k||``, which vanishes for every non-target class and equals
``alpha * ||b_perp||`` for the target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import RANK_TOL, l2_norm, orthonormalize, project_orth_complement


@dataclass(frozen=True, eq=False)
class LinearProblem:
    class_sets: tuple[np.ndarray, ...]  # per class, (n_k, dim) augmented rows
    gammas: tuple[np.ndarray, ...]
    target: int
    source: int
    backdoor: np.ndarray  # b^(t)
    alpha: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if any(np.any(g < 0) for g in self.gammas):
            raise ValueError("mixing coefficients must be non-negative")
        if l2_norm(project_orth_complement(self.backdoor, self.class_sets[self.target])) <= RANK_TOL * max(l2_norm(self.backdoor), 1.0):
            raise ValueError("backdoor component lies in the span of the target class set")

    @property
    def num_classes(self) -> int:
        return len(self.class_sets)

    @property
    def dim(self) -> int:
        return self.class_sets[0].shape[1]

    @property
    def weights(self) -> np.ndarray:
        W = np.vstack([g @ Y for g, Y in zip(self.gammas, self.class_sets)])
        W[self.target] += self.alpha * self.backdoor
        return W

    @property
    def b_perp(self) -> np.ndarray:
        """Component of ``alpha * b`` orthogonal to ``span(Y_t)``."""
        return self.alpha * project_orth_complement(self.backdoor, self.class_sets[self.target])

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "dim": self.dim, "target": self.target,
                "source": self.source, "alpha": self.alpha}


def gen_linear_problem(K: int, dim: int, samples_per_class: int, seed: int,
                       alpha: Optional[float] = None, target: Optional[int] = None,
                       source: Optional[int] = None) -> LinearProblem:
    """Random problem with an additive backdoor ``b = y_s + pattern`` from a source-class sample."""
    if K < 2 or samples_per_class < 1:
        raise ValueError("need K >= 2 and at least one sample per class")
    if dim <= samples_per_class:
        raise ValueError("dim must exceed samples_per_class")
    if alpha is not None and alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng([seed, 0x11AE])
    t = int(rng.integers(K)) if target is None else int(target)
    s = int((t + 1 + rng.integers(K - 1)) % K) if source is None else int(source)
    if s == t:
        raise ValueError("source must differ from target")
    feat = dim - 1
    sets = []
    for _ in range(K):
        centre = rng.normal(0.0, 1.0, feat)
        X = centre + 0.5 * rng.normal(0.0, 1.0, (samples_per_class, feat))
        sets.append(np.hstack([X, np.ones((samples_per_class, 1))]))
    gammas = tuple(rng.uniform(0.0, 1.0, samples_per_class) for _ in range(K))
    a = float(rng.uniform(0.5, 2.0)) if alpha is None else float(alpha)
    for _ in range(100):
        pattern = np.append(rng.normal(0.0, 1.0, feat), 0.0)
        b = sets[s][int(rng.integers(samples_per_class))] + pattern
        if l2_norm(project_orth_complement(b, sets[t])) > 1e-6 * l2_norm(b):
            return LinearProblem(tuple(sets), gammas, t, s, b, a)
    raise ValueError("could not draw a backdoor outside the target span")


def baseline_mlbd(prob: LinearProblem) -> np.ndarray:
    """max_y w_k . y over the unit sphere, i.e. ``||w_k||``, for every class."""
    return np.array([l2_norm(w) for w in prob.weights])


def ortho_mlbd(prob: LinearProblem) -> np.ndarray:
    """Same maximum with ``y`` restricted to the orthogonal complement of ``span(Y_k)``."""
    return np.array([l2_norm(project_orth_complement(w, Y)) for w, Y in zip(prob.weights, prob.class_sets)])


def ortho_maximizer(prob: LinearProblem, k: int) -> Optional[np.ndarray]:
    r = project_orth_complement(prob.weights[k], prob.class_sets[k])
    n = l2_norm(r)
    return None if n == 0 else r / n


def gen_decoy_problem(K: int = 4, dim: int = 20, samples_per_class: int = 5, seed: int = 0,
                      decoy_scale: Optional[float] = None) -> tuple[LinearProblem, int]:
    """A problem whose non-target decoy class wins the unconstrained detector.

    The decoy's mixing coefficients are scaled until ``||w_decoy||`` exceeds the
    target's by a factor of two, so the baseline points at the decoy while the
    orthogonalized statistic still isolates the target.
    """
    prob = gen_linear_problem(K, dim, samples_per_class, seed)
    decoy = (prob.target + 1) % K
    if decoy == prob.source and K > 2:
        decoy = (decoy + 1) % K
    base = baseline_mlbd(prob)
    if decoy_scale is None:
        decoy_scale = max(1.0, 2.0 * base[prob.target] / max(base[decoy], 1e-12))
    gammas = list(prob.gammas)
    gammas[decoy] = gammas[decoy] * decoy_scale
    return LinearProblem(prob.class_sets, tuple(gammas), prob.target, prob.source, prob.backdoor, prob.alpha), decoy


def theory_report(prob: LinearProblem) -> dict:
    base = baseline_mlbd(prob)
    orth = ortho_mlbd(prob)
    return {
        "problem": prob.to_dict(),
        "baseline": base.tolist(),
        "orthogonalized": orth.tolist(),
        "b_perp_norm": l2_norm(prob.b_perp),
        "baseline_argmax": int(np.argmax(base)),
        "orthogonalized_argmax": int(np.argmax(orth)),
        "target_rank": int(orthonormalize(prob.class_sets[prob.target]).shape[0]),
    }
