"""Post-training backdoor detectors, with and without the CSO penalty.

Four families, each producing one statistic per putative target class:

* ``mmbd`` / ``mlbd``: maximize the class margin (or logit) over the pixel box.
* ``nc``: reverse-engineer a blended trigger (spatial mask plus pattern) that
  sends other classes' clean samples to the class; statistic is the mask L1 norm.
* ``ptred``: smallest additive perturbation moving a source class to the
  class; statistic is its L2 norm, minimized over sources.

The ``*_cso`` variants add ``lambda * C_t`` to the objective being minimized.
Outliers are flagged with a median-absolute-deviation index.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cso import CsoContext, cso_from_features
from .data import CleanSet
from .model import Network, backward_input, cross_entropy, forward_with_features

VARIANTS = ("mmbd", "mmbd_cso", "mlbd", "mlbd_cso", "nc", "nc_cso", "ptred", "ptred_cso")
DEFAULT_LAMBDA = {"nc_cso": 0.01, "ptred_cso": 0.1, "mmbd_cso": 400.0, "mlbd_cso": 400.0}
MAD_SCALE = 1.4826
MAD_EPS = 1e-9
TAU_MAX = 3.5
TAU_MIN = 2.0


@dataclass(frozen=True)
class DetectorConfig:
    variant: str = "mmbd_cso"
    lambda_: Optional[float] = None  # None -> per-variant default
    steps: int = 300
    learning_rate: float = 0.05
    restarts: int = 3
    seed: int = 0
    lr_decay: float = 0.5
    lr_decay_every: int = 100
    # margin/logit variants: clamp lambda to within `lambda_balance`x of the clean margin/penalty ratio
    auto_lambda: bool = True
    lambda_balance: float = 10.0
    nc_mask_weight: float = 1e-2
    nc_mask_init: Optional[float] = None  # None -> uniform random per restart
    nc_success: float = 0.9
    ptred_misclass_target: float = 0.9
    ptred_norm_weight: float = 1e-3
    tau: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown detector variant {self.variant!r}")
        if self.lambda_ is not None and self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.restarts < 1 or self.steps < 0:
            raise ValueError("need restarts >= 1 and steps >= 0")
        if not 0 < self.ptred_misclass_target <= 1:
            raise ValueError("ptred_misclass_target must lie in (0, 1]")

    @property
    def family(self) -> str:
        return self.variant.split("_")[0]

    @property
    def uses_cso(self) -> bool:
        return self.variant.endswith("_cso")

    @property
    def lam(self) -> float:
        if not self.uses_cso:
            return 0.0
        return DEFAULT_LAMBDA[self.variant] if self.lambda_ is None else float(self.lambda_)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


@dataclass
class ClassStatistic:
    class_id: int
    value: float
    direction: str  # "max_suspicious" or "min_suspicious"
    aux: dict = field(default_factory=dict)


@dataclass
class DetectionVerdict:
    attacked: bool
    inferred_target: Optional[int]
    scores: list
    threshold: float
    stats: list = field(default_factory=list)
    variant: str = ""
    lam: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "lambda": self.lam,
            "per_class": [
                {"class": s.class_id, "value": _finite_or_none(s.value), "score": _finite_or_none(sc)}
                for s, sc in zip(self.stats, self.scores)
            ],
            "attacked": self.attacked,
            "inferred_target": self.inferred_target,
            "threshold": self.threshold,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


class _Adam:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.s = np.zeros(shape)
        self.t = 0

    def direction(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.s = 0.999 * self.s + 0.001 * g * g
        return (self.m / (1 - 0.9 ** self.t)) / (np.sqrt(self.s / (1 - 0.999 ** self.t)) + 1e-8)


def _lr(cfg: DetectorConfig, step: int) -> float:
    return cfg.learning_rate * cfg.lr_decay ** (step // cfg.lr_decay_every)


def _rng(cfg: DetectorConfig, *key) -> np.random.Generator:
    # the CSO flag is deliberately absent so that variant pairs share draws
    return np.random.default_rng([cfg.seed, 0xDE7EC7, *key])


# --- margin / logit maximization -----------------------------------------------------------


def _margin_terms(logits: np.ndarray, t: int, kind: str):
    n, K = logits.shape
    G = np.zeros_like(logits)
    G[:, t] = 1.0
    if kind == "logit":
        return logits[:, t].copy(), G
    others = logits.copy()
    others[:, t] = -np.inf
    k_star = np.argmax(others, axis=1)
    G[np.arange(n), k_star] -= 1.0
    return logits[:, t] - others[np.arange(n), k_star], G


def _objective(net: Network, Z: np.ndarray, t: int, ctx: Optional[CsoContext], lam: float, kind: str,
               grad: bool = True):
    """Row-wise ``stat(z) - lam * C_t(z)``, the raw statistic, the penalty and the input gradient."""
    logits, F, cache = forward_with_features(net, Z)
    stat, dlog = _margin_terms(logits, t, kind)
    if ctx is not None:
        terms = cso_from_features(ctx, F)
        J, pen = stat - lam * terms.value, terms.value
    else:
        J, pen = stat, np.zeros_like(stat)
    G = None
    if grad:
        G = backward_input(net, cache, dlog, -lam * terms.grad_features if ctx is not None else None)
    return J, stat, pen, G


def margin_objective(net: Network, z, t: int, ctx: Optional[CsoContext] = None, lam: float = 0.0,
                     kind: str = "margin") -> tuple[float, np.ndarray]:
    """The box-search objective for class ``t`` at a single input and its gradient.

    ``kind="margin"`` uses ``g_t - max_{k != t} g_k``, ``kind="logit"`` uses ``g_t``.
    """
    if kind not in ("margin", "logit"):
        raise ValueError(f"unknown objective kind {kind!r}")
    J, _, _, G = _objective(net, np.atleast_2d(np.asarray(z, dtype=np.float64)), t, ctx, lam, kind)
    return float(J[0]), G[0]


def _box_max_stat(net: Network, t: int, ctx: Optional[CsoContext], cfg: DetectorConfig,
                  kind: str, lam: float) -> ClassStatistic:
    D = net.config.input_dim
    rng = _rng(cfg, t)
    Z = rng.uniform(0.0, 1.0, size=(cfg.restarts, D))
    opt = _Adam(Z.shape)
    use_cso = ctx is not None and lam > 0
    best_J = np.full(cfg.restarts, -np.inf)
    best_stat = np.full(cfg.restarts, np.nan)
    best_pen = np.zeros(cfg.restarts)
    alive = np.ones(cfg.restarts, dtype=bool)
    for step in range(cfg.steps + 1):
        J, stat, pen, G = _objective(net, Z, t, ctx if use_cso else None, lam, kind, grad=step < cfg.steps)
        alive &= np.isfinite(J)
        better = alive & (J > best_J)
        best_J[better] = J[better]
        best_stat[better] = stat[better]
        best_pen[better] = pen[better]
        if step == cfg.steps:
            break
        Z = np.clip(Z + _lr(cfg, step) * opt.direction(G), 0.0, 1.0)
    if not np.any(alive):
        raise FloatingPointError(f"every restart diverged for class {t}")
    r = int(np.argmax(np.where(alive, best_J, -np.inf)))
    aux = {"best_objective": float(best_J[r]), "restart": r}
    if use_cso:
        aux["penalty"] = float(best_pen[r])
    return ClassStatistic(t, float(best_stat[r]), "max_suspicious", aux)


def mmbd_stat(net: Network, t: int, cso: Optional[CsoContext] = None,
              cfg: DetectorConfig = DetectorConfig("mmbd")) -> ClassStatistic:
    """Best achieved margin ``g_t - max_{k != t} g_k`` over the pixel box (minus lambda*C_t when CSO is on)."""
    return _box_max_stat(net, t, cso, cfg, "margin", cfg.lam if cso is not None else 0.0)


def mlbd_stat(net: Network, t: int, cso: Optional[CsoContext] = None,
              cfg: DetectorConfig = DetectorConfig("mlbd")) -> ClassStatistic:
    """As :func:`mmbd_stat` with the raw logit ``g_t`` as the objective."""
    return _box_max_stat(net, t, cso, cfg, "logit", cfg.lam if cso is not None else 0.0)


# --- Neural Cleanse ----------------------------------------------------------------------


def nc_stat(net: Network, t: int, clean: CleanSet, cso: Optional[CsoContext] = None,
            cfg: DetectorConfig = DetectorConfig("nc")) -> ClassStatistic:
    """Smallest-L1 spatial mask whose blend sends other classes' clean samples to ``t``."""
    X = clean.others(t) if len(clean.per_class) > 1 else np.zeros((0, net.config.input_dim))
    if X.shape[0] == 0:
        raise ValueError("no clean samples from classes other than the target")
    lam = cfg.lam if cso is not None else 0.0
    use_cso = cso is not None and lam > 0
    n, D = X.shape
    rng = _rng(cfg, t)
    best = None  # (norm, m, p, frac) among successful candidates
    fallback = None  # highest induced misclassification seen
    for r in range(cfg.restarts):
        m = np.full(D, cfg.nc_mask_init) if cfg.nc_mask_init is not None else rng.uniform(0.0, 1.0, D)
        p = rng.uniform(0.0, 1.0, D)
        opt_m, opt_p = _Adam(D), _Adam(D)
        for step in range(cfg.steps + 1):
            Z = (1.0 - m) * X + m * p
            logits, F, cache = forward_with_features(net, Z)
            frac = float(np.mean(np.argmax(logits, axis=1) == t))
            norm = float(np.sum(m))
            if frac >= cfg.nc_success and (best is None or norm < best[0]):
                best = (norm, m.copy(), p.copy(), frac)
            if fallback is None or frac > fallback[3] or (frac == fallback[3] and norm < fallback[0]):
                fallback = (norm, m.copy(), p.copy(), frac)
            if step == cfg.steps:
                break
            _, dlog = cross_entropy(logits, np.full(n, t))
            dF = None
            if use_cso:
                dF = lam * cso_from_features(cso, F).grad_features / n
            G = backward_input(net, cache, dlog, dF)
            gm = np.sum(G * (p - X), axis=0) + cfg.nc_mask_weight
            gp = np.sum(G * m, axis=0)
            lr = _lr(cfg, step)
            m = np.clip(m - lr * opt_m.direction(gm), 0.0, 1.0)
            p = np.clip(p - lr * opt_p.direction(gp), 0.0, 1.0)
    converged = best is not None
    norm, m, p, frac = best if converged else fallback
    return ClassStatistic(t, norm, "min_suspicious",
                          {"converged": converged, "misclassification": frac, "mask": m, "pattern": p})


# --- PT-RED ------------------------------------------------------------------------------


def _flip_fraction(net: Network, X: np.ndarray, p: np.ndarray, t: int) -> float:
    logits = forward_with_features(net, np.clip(X + p, 0.0, 1.0))[0]
    return float(np.mean(np.argmax(logits, axis=1) == t))


def _shrink(net: Network, X: np.ndarray, p: np.ndarray, t: int, pi: float, iters: int = 40) -> np.ndarray:
    """Smallest scale along the ray through ``p`` that still reaches the misclassification target."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _flip_fraction(net, X, mid * p, t) >= pi:
            hi = mid
        else:
            lo = mid
    return hi * p


def ptred_pair_stat(net: Network, s: int, t: int, clean: CleanSet, cso: Optional[CsoContext] = None,
                    cfg: DetectorConfig = DetectorConfig("ptred")) -> ClassStatistic:
    """Norm of the smallest additive perturbation found that sends ``D_s`` to ``t``."""
    if s == t:
        raise ValueError("source and target must differ")
    X = np.atleast_2d(clean[s])
    if X.shape[0] == 0:
        raise ValueError(f"no clean samples for source class {s}")
    lam = cfg.lam if cso is not None else 0.0
    use_cso = cso is not None and lam > 0
    pi = cfg.ptred_misclass_target
    n, D = X.shape
    if _flip_fraction(net, X, np.zeros(D), t) >= pi:
        return ClassStatistic(t, 0.0, "min_suspicious", {"source": s, "converged": True, "misclassification": 1.0})
    rng = _rng(cfg, s, t)
    best = None
    for r in range(cfg.restarts):
        p = np.zeros(D) if r == 0 else rng.normal(0.0, 0.01, D)
        for step in range(cfg.steps):
            Z = np.clip(X + p, 0.0, 1.0)
            inside = (X + p > 0.0) & (X + p < 1.0)
            logits, F, cache = forward_with_features(net, Z)
            if float(np.mean(np.argmax(logits, axis=1) == t)) >= pi:
                cand = _shrink(net, X, p, t, pi)
                nrm = float(np.linalg.norm(cand))
                if best is None or nrm < best[0]:
                    best = (nrm, cand)
                break
            _, dlog = cross_entropy(logits, np.full(n, t))
            dF = lam * cso_from_features(cso, F).grad_features / n if use_cso else None
            G = backward_input(net, cache, dlog, dF)
            g = np.sum(G * inside, axis=0) + 2.0 * cfg.ptred_norm_weight * p
            gn = np.linalg.norm(g)
            if gn == 0.0 or not np.isfinite(gn):
                break
            p = np.clip(p - _lr(cfg, step) * g / gn, -1.0, 1.0)
    if best is None:
        return ClassStatistic(t, math.inf, "min_suspicious", {"source": s, "converged": False})
    return ClassStatistic(t, best[0], "min_suspicious",
                          {"source": s, "converged": True, "perturbation": best[1]})


def ptred_stat(net: Network, t: int, clean: CleanSet, cso: Optional[CsoContext] = None,
               cfg: DetectorConfig = DetectorConfig("ptred")) -> ClassStatistic:
    """Per-class PT-RED statistic: minimum perturbation norm over all putative sources."""
    pairs = [ptred_pair_stat(net, s, t, clean, cso, cfg) for s in sorted(clean.per_class) if s != t]
    best = min(pairs, key=lambda st: st.value)
    aux = dict(best.aux)
    aux["per_source"] = {st.aux["source"]: st.value for st in pairs}
    return ClassStatistic(t, best.value, "min_suspicious", aux)


# --- decision rule ------------------------------------------------------------------------


def mad_scores(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    return (v - med) / (MAD_SCALE * max(mad, MAD_EPS))


def decide(stats: list, tau: Optional[float] = None) -> DetectionVerdict:
    """MAD outlier rule; min-type statistics are scored through their reciprocals."""
    if len(stats) < 4:
        raise ValueError("need statistics for at least 4 classes")
    directions = {s.direction for s in stats}
    if len(directions) != 1:
        raise ValueError("inconsistent statistic directions")
    direction = directions.pop()
    values = np.array([s.value for s in stats], dtype=np.float64)
    if direction == "min_suspicious":
        with np.errstate(divide="ignore"):
            values = 1.0 / (values + MAD_EPS)
        tau = TAU_MIN if tau is None else tau
    elif direction == "max_suspicious":
        tau = TAU_MAX if tau is None else tau
    else:
        raise ValueError(f"unknown direction {direction!r}")
    scores = mad_scores(values)
    i = int(np.argmax(scores))
    attacked = bool(scores[i] > tau)
    return DetectionVerdict(attacked, stats[i].class_id if attacked else None, scores.tolist(), float(tau), list(stats))


# --- orchestration ------------------------------------------------------------------------


def build_contexts(net: Network, clean: CleanSet, masks: dict, rectify: bool = True) -> dict[int, CsoContext]:
    return {k: CsoContext.build(net, masks.get(k), clean[k], rectify=rectify, class_id=k)
            for k in sorted(clean.per_class)}


def balance_scale(net: Network, contexts: dict, clean: CleanSet, kind: str = "margin") -> Optional[float]:
    """Median over classes of mean statistic / mean penalty at the class's own clean samples.

    This is the lambda at which the penalty term and the margin (or logit) term
    are equal on clean data. Classes with a non-positive ratio are skipped.
    """
    ratios = []
    for t, ctx in contexts.items():
        logits, F, _ = forward_with_features(net, clean[t])
        m = float(np.mean(_margin_terms(logits, t, kind)[0]))
        c = float(np.mean(cso_from_features(ctx, F).value))
        if m > 0 and c > 0:
            ratios.append(m / c)
    return float(np.median(ratios)) if ratios else None


def balanced_lambda(net: Network, contexts: dict, cfg: DetectorConfig, clean: CleanSet) -> float:
    """Clamp lambda into ``[s / lambda_balance, s * lambda_balance]`` with ``s`` from :func:`balance_scale`."""
    lam = cfg.lam
    if lam <= 0 or not cfg.auto_lambda or cfg.family not in ("mmbd", "mlbd"):
        return lam
    s = balance_scale(net, contexts, clean, "margin" if cfg.family == "mmbd" else "logit")
    if s is None:
        return lam
    b = cfg.lambda_balance
    return float(np.clip(lam, s / b, s * b))


def class_statistics(net: Network, clean: CleanSet, cfg: DetectorConfig,
                     masks: Optional[dict] = None, rectify: bool = True) -> tuple[list, float]:
    """Per-class statistics for every class, plus the lambda actually used."""
    contexts = None
    lam = 0.0
    if cfg.uses_cso:
        if masks is None:
            raise ValueError(f"{cfg.variant} needs per-class masks")
        contexts = build_contexts(net, clean, masks, rectify)
        lam = balanced_lambda(net, contexts, cfg, clean)
    run_cfg = dataclasses.replace(cfg, lambda_=lam) if cfg.uses_cso else cfg
    stats = []
    for t in range(net.config.num_classes):
        ctx = contexts[t] if contexts is not None else None
        if cfg.family == "mmbd":
            stats.append(mmbd_stat(net, t, ctx, run_cfg))
        elif cfg.family == "mlbd":
            stats.append(mlbd_stat(net, t, ctx, run_cfg))
        elif cfg.family == "nc":
            stats.append(nc_stat(net, t, clean, ctx, run_cfg))
        else:
            stats.append(ptred_stat(net, t, clean, ctx, run_cfg))
    return stats, lam


def run_detector(net: Network, clean: CleanSet, cfg: DetectorConfig,
                 masks: Optional[dict] = None, rectify: bool = True) -> DetectionVerdict:
    stats, lam = class_statistics(net, clean, cfg, masks, rectify)
    verdict = decide(stats, cfg.tau)
    verdict.variant, verdict.lam, verdict.seed = cfg.variant, lam, cfg.seed
    return verdict
