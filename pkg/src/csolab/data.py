"""Synthetic image-like datasets with known per-class informative pixels."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 8
    height: int = 8
    width: int = 8
    template_energy: float = 0.6
    support_size: int = 16
    noise_std: float = 0.1
    samples_per_class: int = 250
    decoy_boost: Optional[float] = None
    decoy_class: int = 0
    disjoint_supports: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= self.support_size <= self.height * self.width:
            raise ValueError("support_size must be in [1, H*W]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0 <= self.decoy_class < self.num_classes:
            raise ValueError("decoy_class out of range")
        if self.disjoint_supports and self.num_classes * self.support_size > self.height * self.width:
            raise ValueError("disjoint supports need num_classes * support_size <= H*W")

    @property
    def input_dim(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    shape: tuple[int, int]
    # stable per-sample identities, used to keep clean and evaluation pools disjoint
    ids: np.ndarray = None
    poisoned: np.ndarray = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=int)
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] != self.shape[0] * self.shape[1]:
            raise ValueError(f"pixel dim {self.X.shape} does not match shape {self.shape}")
        if self.y.shape != (n,):
            raise ValueError("label count does not match sample count")
        if n and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if n and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=int)
        self.poisoned = np.zeros(n, dtype=bool) if self.poisoned is None else np.asarray(self.poisoned, dtype=bool)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.shape, self.ids[idx], self.poisoned[idx])

    def of_class(self, k: int) -> np.ndarray:
        return self.X[self.y == k]


@dataclass
class CleanSet:
    """Defender-side clean samples, ``per_class[k]`` of shape ``(n_img, D)``."""

    per_class: dict[int, np.ndarray]
    ids: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_img(self) -> int:
        return min(len(v) for v in self.per_class.values())

    def __getitem__(self, k: int) -> np.ndarray:
        return self.per_class[k]

    def others(self, t: int) -> np.ndarray:
        return np.vstack([v for k, v in sorted(self.per_class.items()) if k != t])

    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())


def _cosine_pattern(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Sum of three random low-frequency 2-D cosines, rescaled to [0, 1]."""
    ii, jj = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    P = np.zeros((H, W))
    for _ in range(3):
        fx, fy = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        P += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fx * ii + fy * jj) + phase)
    lo, hi = P.min(), P.max()
    return (P - lo) / (hi - lo) if hi > lo else np.ones((H, W))


def make_templates(cfg: SynthConfig, max_tries: int = 100) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class templates ``(K, H*W)`` and their informative pixel index sets.

    Template values on the support lie in ``[0.4, 1] * template_energy``; pixels
    off the support are zero. Templates are resampled until every pair is at
    least ``6 * noise_std`` apart in L2.
    """
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    D = cfg.input_dim
    for _ in range(max_tries):
        T = np.zeros((cfg.num_classes, D))
        supports = []
        pool = rng.permutation(D)
        for k in range(cfg.num_classes):
            if cfg.disjoint_supports:
                sup = np.sort(pool[k * cfg.support_size:(k + 1) * cfg.support_size])
            else:
                sup = np.sort(rng.choice(D, size=cfg.support_size, replace=False))
            pat = _cosine_pattern(rng, cfg.height, cfg.width).ravel()
            T[k, sup] = cfg.template_energy * (0.4 + 0.6 * pat[sup])
            supports.append(sup)
        if cfg.decoy_boost is not None:
            T[cfg.decoy_class] = np.clip(T[cfg.decoy_class] * cfg.decoy_boost, 0.0, 1.0)
        d = np.linalg.norm(T[:, None, :] - T[None, :, :], axis=-1)
        d[np.diag_indices(cfg.num_classes)] = np.inf
        if d.min() >= 6 * cfg.noise_std:
            return T, supports
    raise ValueError("could not draw sufficiently separated templates; lower noise_std")


def gen_synthetic(cfg: SynthConfig, stream: int = 0, samples_per_class: Optional[int] = None) -> Dataset:
    """Draw ``clip(template + noise)`` samples, class-major order.

    Templates depend only on ``cfg.seed``; ``stream`` selects an independent
    noise draw so that train and test pools share class structure.
    """
    T, _ = make_templates(cfg)
    n = cfg.samples_per_class if samples_per_class is None else samples_per_class
    rng = np.random.default_rng([cfg.seed, 0x5A3F, stream])
    X = np.repeat(T, n, axis=0)
    if cfg.noise_std > 0:
        X = X + rng.normal(0.0, cfg.noise_std, size=X.shape)
    X = np.clip(X, 0.0, 1.0)
    y = np.repeat(np.arange(cfg.num_classes), n)
    ids = stream * 10**9 + np.arange(len(y))
    return Dataset(X, y, cfg.num_classes, (cfg.height, cfg.width), ids)


def draw_clean_set(data: Dataset, n_img: int, seed: int) -> tuple[CleanSet, Dataset]:
    """Sample ``n_img`` per class without replacement; return them and the remaining pool."""
    if n_img < 1:
        raise ValueError("n_img must be >= 1")
    rng = np.random.default_rng(seed)
    taken = []
    per_class, ids = {}, {}
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.y == k)
        if len(idx) < n_img:
            raise ValueError(f"class {k} has {len(idx)} samples, fewer than n_img={n_img}")
        pick = np.sort(rng.choice(idx, size=n_img, replace=False))
        per_class[k] = data.X[pick].copy()
        ids[k] = data.ids[pick].copy()
        taken.append(pick)
    keep = np.setdiff1d(np.arange(len(data)), np.concatenate(taken))
    return CleanSet(per_class, ids), data.subset(keep)


# --- CSV / JSON interchange ------------------------------------------------------------


def save_csv(data: Dataset, path, include_poisoned: bool = False) -> None:
    path = Path(path)
    D = data.X.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"p{j}" for j in range(D)), *(["poisoned"] if include_poisoned else [])])
        for i in range(len(data)):
            row = [int(data.y[i]), *(repr(float(v)) for v in data.X[i])]
            if include_poisoned:
                row.append(int(data.poisoned[i]))
            w.writerow(row)
    meta = {"num_classes": data.num_classes, "shape": list(data.shape), "ids": data.ids.tolist()}
    path.with_suffix(".meta.json").write_text(json.dumps(meta))


def load_csv(path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_flag = header[-1] == "poisoned"
    ncol = len(header) - (2 if has_flag else 1)
    y = np.array([int(r[0]) for r in body], dtype=int)
    X = np.array([[float(v) for v in r[1:1 + ncol]] for r in body]).reshape(len(body), ncol)
    flags = np.array([bool(int(r[-1])) for r in body]) if has_flag else None
    meta_path = path.with_suffix(".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        K, shape, ids = meta["num_classes"], tuple(meta["shape"]), meta.get("ids")
    else:
        side = int(round(np.sqrt(ncol)))
        K, shape, ids = int(y.max()) + 1, (side, ncol // side), None
    return Dataset(X, y, K, shape, ids, flags)


def save_synth_config(cfg: SynthConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def load_synth_config(path) -> SynthConfig:
    return SynthConfig(**json.loads(Path(path).read_text()))
