"""Trigger mechanisms, training-set poisoning and attack metrics.

A poisoning plan has a dirty part (triggered source-class samples relabeled
to the target) and, in ``mixed`` mode, a clean part (triggered samples from
classes outside sources and target that keep their labels). The clean part is
what suppresses collateral damage.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .model import Network, predict

TRIGGER_KINDS = ("patch", "additive", "one_pixel", "blend", "intrinsic_blend")
CHESSBOARD_AMPLITUDE = 3 / 255
ONE_PIXEL_DELTA = 75 / 255
BLEND_ALPHA = 0.2


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    kind: str
    shape: tuple[int, int]
    size: int = 3
    location: tuple[int, int] = (0, 0)
    # patch values (size x size) for patch; full-image pattern for additive/blend;
    # source image (H x W) for intrinsic_blend
    pattern: Optional[np.ndarray] = field(default=None, repr=False)
    mask: Optional[np.ndarray] = field(default=None, repr=False)
    amplitude: float = CHESSBOARD_AMPLITUDE
    pixel: int = 0
    delta: float = ONE_PIXEL_DELTA
    alpha: float = BLEND_ALPHA

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        H, W = self.shape
        object.__setattr__(self, "shape", (int(H), int(W)))
        object.__setattr__(self, "location", (int(self.location[0]), int(self.location[1])))
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("blend ratio must lie in [0, 1]")
        if self.kind in ("patch", "intrinsic_blend"):
            r, c = self.location
            if self.size < 1 or r < 0 or c < 0 or r + self.size > H or c + self.size > W:
                raise ValueError(f"patch of size {self.size} at {self.location} does not fit in {self.shape}")
        if self.kind == "one_pixel" and not 0 <= self.pixel < H * W:
            raise ValueError(f"pixel index {self.pixel} out of range")
        if self.pattern is not None:
            object.__setattr__(self, "pattern", np.asarray(self.pattern, dtype=np.float64))
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.float64))
        if self.kind == "patch" and (self.pattern is None or self.pattern.shape != (self.size, self.size)):
            raise ValueError("patch trigger needs a size x size pattern")
        if self.kind in ("additive", "blend") and (self.pattern is None or self.pattern.size != H * W):
            raise ValueError(f"{self.kind} trigger needs a full-image pattern")
        if self.kind == "blend" and (self.mask is None or self.mask.size != H * W):
            raise ValueError("blend trigger needs a full-image mask")
        if self.kind == "intrinsic_blend" and (self.pattern is None or self.pattern.size != H * W):
            raise ValueError("intrinsic_blend needs an H x W source image")

    @property
    def support(self) -> np.ndarray:
        """Boolean pixel support of the trigger (where it can change a sample)."""
        H, W = self.shape
        S = np.zeros((H, W), dtype=bool)
        if self.kind in ("patch", "intrinsic_blend"):
            r, c = self.location
            S[r:r + self.size, c:c + self.size] = True
        elif self.kind == "one_pixel":
            S.flat[self.pixel] = True
        elif self.kind == "additive":
            S = self.pattern.reshape(H, W) != 0
        else:
            S = self.mask.reshape(H, W) > 0
        return S.ravel()

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "shape": list(self.shape), "size": self.size,
             "location": list(self.location), "amplitude": self.amplitude, "pixel": self.pixel,
             "delta": self.delta, "alpha": self.alpha}
        if self.pattern is not None:
            d["pattern"] = self.pattern.tolist()
        if self.mask is not None:
            d["mask"] = self.mask.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        d = dict(d)
        d["shape"] = tuple(d["shape"])
        d["location"] = tuple(d.get("location", (0, 0)))
        return cls(**d)


def _pick_window(rng, H: int, W: int, s: int, avoid) -> tuple[int, int]:
    """Random ``s x s`` window origin, preferring windows that touch the fewest ``avoid`` pixels."""
    origins = [(r, c) for r in range(H - s + 1) for c in range(W - s + 1)]
    if avoid is not None:
        A = np.asarray(avoid, dtype=bool).reshape(H, W)
        hits = np.array([A[r:r + s, c:c + s].sum() for r, c in origins])
        origins = [o for o, h in zip(origins, hits) if h == hits.min()]
    r, c = origins[int(rng.integers(len(origins)))]
    return int(r), int(c)


def make_trigger(kind: str, shape=(8, 8), seed: int = 0, avoid=None, **overrides) -> TriggerSpec:
    """Draw a trigger with the default parameterization for ``kind``.

    Locations and random patterns are drawn once from ``seed`` and are then
    fixed for every poisoned sample of the attack. ``avoid`` is an optional
    boolean pixel mask (e.g. the informative class pixels); patch, blend and
    one-pixel triggers are placed to overlap it as little as possible.
    """
    H, W = shape
    if avoid is not None and np.asarray(avoid).size != H * W:
        raise ValueError("avoid mask must have H*W entries")
    rng = np.random.default_rng([seed, 0x7216])
    kw: dict = {}
    if kind == "patch":
        s = overrides.pop("size", 3)
        loc = _pick_window(rng, H, W, s, avoid)
        pattern = np.zeros((s, s))
        while not pattern.any():
            pattern = rng.integers(0, 2, size=(s, s)).astype(float)
        kw = dict(size=s, location=loc, pattern=pattern)
    elif kind == "additive":
        ii, jj = np.indices((H, W))
        kw = dict(pattern=((ii + jj) % 2).astype(float).ravel(), amplitude=CHESSBOARD_AMPLITUDE)
    elif kind == "one_pixel":
        free = np.arange(H * W) if avoid is None else np.flatnonzero(~np.asarray(avoid, dtype=bool).ravel())
        if free.size == 0:
            free = np.arange(H * W)
        kw = dict(pixel=int(free[rng.integers(free.size)]), delta=ONE_PIXEL_DELTA)
    elif kind == "blend":
        s = overrides.pop("size", 3)
        r, c = _pick_window(rng, H, W, s, avoid)
        m = np.zeros((H, W))
        m[r:r + s, c:c + s] = 1.0
        kw = dict(size=s, location=(r, c), pattern=rng.uniform(0, 1, size=H * W), mask=m.ravel(), alpha=BLEND_ALPHA)
    elif kind == "intrinsic_blend":
        s = overrides.pop("size", max(1, H // 2))
        kw = dict(size=s, location=(H - s, W - s), alpha=BLEND_ALPHA)
    else:
        raise ValueError(f"unknown trigger kind {kind!r}")
    kw.update(overrides)
    return TriggerSpec(kind=kind, shape=(H, W), **kw)


def _crop_origin(trig: TriggerSpec, sample_seed) -> tuple[int, int]:
    H, W = trig.shape
    rng = np.random.default_rng([0xC209, int(sample_seed or 0)])
    return int(rng.integers(0, H - trig.size + 1)), int(rng.integers(0, W - trig.size + 1))


def apply_trigger(x, trig: TriggerSpec, sample_seed: Optional[int] = None) -> np.ndarray:
    """Embed the trigger in a flat image; output pixels are clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    H, W = trig.shape
    if x.shape != (H * W,):
        raise ValueError(f"expected a flat image of {H * W} pixels, got shape {x.shape}")
    img = x.reshape(H, W).copy()
    if trig.kind == "patch":
        r, c = trig.location
        img[r:r + trig.size, c:c + trig.size] = trig.pattern
    elif trig.kind == "additive":
        img = img + trig.amplitude * trig.pattern.reshape(H, W)
    elif trig.kind == "one_pixel":
        img.flat[trig.pixel] += trig.delta
    elif trig.kind == "blend":
        m = trig.alpha * trig.mask.reshape(H, W)
        img = (1.0 - m) * img + m * trig.pattern.reshape(H, W)
    else:
        cr, cc = _crop_origin(trig, sample_seed)
        s = trig.size
        crop = trig.pattern.reshape(H, W)[cr:cr + s, cc:cc + s]
        r, c = trig.location
        a = trig.alpha
        img[r:r + s, c:c + s] = (1.0 - a) * img[r:r + s, c:c + s] + a * crop
    return np.clip(img, 0.0, 1.0).ravel()


def apply_trigger_batch(X, trig: TriggerSpec, sample_seeds: Optional[Sequence[int]] = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if sample_seeds is None:
        sample_seeds = range(X.shape[0])
    return np.vstack([apply_trigger(x, trig, s) for x, s in zip(X, sample_seeds)]) if len(X) else X.copy()


@dataclass(frozen=True)
class PoisonPlan:
    sources: tuple[int, ...]
    target: int
    dpr: float
    cpr: float = 0.0
    mode: str = "dirty_only"

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(sorted(int(s) for s in self.sources)))
        if self.mode not in ("dirty_only", "mixed"):
            raise ValueError(f"unknown poisoning mode {self.mode!r}")
        if self.target in self.sources:
            raise ValueError("target class must not be a source class")
        if not (0 <= self.dpr < 1 and 0 <= self.cpr < 1 and self.dpr + self.cpr < 1):
            raise ValueError("rates must satisfy 0 <= dpr, cpr and dpr + cpr < 1")
        if self.mode == "mixed" and self.cpr <= 0:
            raise ValueError("mixed mode needs cpr > 0")
        if self.mode == "dirty_only" and self.cpr != 0:
            raise ValueError("dirty_only mode must have cpr == 0")

    def bystanders(self, num_classes: int) -> list[int]:
        """Classes outside sources and target (the clean-label pool and the CD population)."""
        return [k for k in range(num_classes) if k != self.target and k not in self.sources]

    def check(self, num_classes: int) -> None:
        if not 0 <= self.target < num_classes or any(not 0 <= s < num_classes for s in self.sources):
            raise ValueError("plan references classes outside the dataset")
        if not self.sources:
            raise ValueError("plan has no source classes")

    @classmethod
    def all_to_one(cls, num_classes: int, target: int, dpr: float) -> "PoisonPlan":
        return cls(tuple(k for k in range(num_classes) if k != target), target, dpr)

    def to_dict(self) -> dict:
        return {"sources": list(self.sources), "target": self.target, "dpr": self.dpr,
                "cpr": self.cpr, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonPlan":
        return cls(tuple(d["sources"]), int(d["target"]), float(d["dpr"]), float(d.get("cpr", 0.0)),
                   d.get("mode", "dirty_only"))


def _count(rate: float, n: int) -> int:
    # guards against 0.29 * 100 == 28.999...
    return int(math.floor(rate * n + 1e-9))


def poison_dataset(data: Dataset, plan: PoisonPlan, trig: TriggerSpec, seed: int) -> tuple[Dataset, dict]:
    """Poison a training set in place (on a copy); returns the new set and achieved counts/rates."""
    plan.check(data.num_classes)
    N = len(data)
    n_dirty = _count(plan.dpr, N)
    n_clean = _count(plan.cpr, N) if plan.mode == "mixed" else 0
    rng = np.random.default_rng([seed, 0x9015])
    src_idx = np.flatnonzero(np.isin(data.y, plan.sources))
    by_idx = np.flatnonzero(np.isin(data.y, plan.bystanders(data.num_classes)))
    if n_dirty > len(src_idx):
        raise ValueError(f"need {n_dirty} source samples, only {len(src_idx)} available")
    if n_clean > len(by_idx):
        raise ValueError(f"need {n_clean} non-source samples, only {len(by_idx)} available")
    dirty = np.sort(rng.choice(src_idx, size=n_dirty, replace=False)) if n_dirty else np.array([], dtype=int)
    clean = np.sort(rng.choice(by_idx, size=n_clean, replace=False)) if n_clean else np.array([], dtype=int)
    X, y, flags = data.X.copy(), data.y.copy(), data.poisoned.copy()
    for i in dirty:
        X[i] = apply_trigger(X[i], trig, sample_seed=int(data.ids[i]) ^ seed)
        y[i] = plan.target
    for i in clean:
        X[i] = apply_trigger(X[i], trig, sample_seed=int(data.ids[i]) ^ seed)
    flags[dirty] = True
    flags[clean] = True
    counts = {"n_total": N, "n_dirty": int(n_dirty), "n_clean": int(n_clean),
              "dpr": n_dirty / N, "cpr": n_clean / N, "opr": n_dirty / N + n_clean / N,
              "dirty_indices": dirty.tolist(), "clean_indices": clean.tolist()}
    return Dataset(X, y, data.num_classes, data.shape, data.ids.copy(), flags), counts


@dataclass(frozen=True)
class AttackReport:
    asr: float
    acc: float
    cd: Optional[float]
    dpr: float
    cpr: float
    opr: float

    def to_dict(self) -> dict:
        return {"asr": self.asr, "acc": self.acc, "cd": self.cd, "dpr": self.dpr, "cpr": self.cpr, "opr": self.opr}


def evaluate_attack(net: Network, eval_data: Dataset, plan: PoisonPlan, trig: TriggerSpec,
                    counts: Optional[dict] = None, seed: int = 0) -> AttackReport:
    """ACC on clean samples, ASR on triggered sources, CD on triggered bystanders.

    CD is ``None`` when there are no bystander classes (all-to-one plans).
    Rates come from ``counts`` when given (achieved), otherwise from the plan.
    """
    plan.check(eval_data.num_classes)
    acc = float(np.mean(predict(net, eval_data.X) == eval_data.y)) if len(eval_data) else None
    if acc is None:
        raise ValueError("empty evaluation set")
    src = eval_data.X[np.isin(eval_data.y, plan.sources)]
    if len(src) == 0:
        raise ValueError("no source-class samples in evaluation data")
    seeds = np.random.default_rng([seed, 0xE7A1]).integers(0, 2**31, size=len(eval_data))
    src_seeds = seeds[np.isin(eval_data.y, plan.sources)]
    asr = float(np.mean(predict(net, apply_trigger_batch(src, trig, src_seeds)) == plan.target))
    by = plan.bystanders(eval_data.num_classes)
    cd = None
    if by:
        sel = np.isin(eval_data.y, by)
        if not np.any(sel):
            raise ValueError("no bystander-class samples in evaluation data")
        cd = float(np.mean(predict(net, apply_trigger_batch(eval_data.X[sel], trig, seeds[sel])) == plan.target))
    if counts is not None:
        dpr, cpr = counts["dpr"], counts["cpr"]
    else:
        dpr, cpr = plan.dpr, plan.cpr
    return AttackReport(asr, acc, cd, dpr, cpr, dpr + cpr)
