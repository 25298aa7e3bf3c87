"""Experiment orchestration: generate -> poison -> train -> fit masks -> detect -> score.

Seeds are a pure function of ``(master seed, model index, repeat index, stage)``
(see :func:`derive_seed`); nothing reads global RNG state, so any trial can be
rerun in isolation and results do not depend on the worker count.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .attacks import (TRIGGER_KINDS, AttackReport, PoisonPlan, apply_trigger_batch, evaluate_attack,
                      make_trigger, poison_dataset)
from .data import SynthConfig, draw_clean_set, gen_synthetic, make_templates, save_csv, save_synth_config
from .detectors import DetectorConfig, run_detector
from .maskfit import MaskFitConfig, fit_all_masks, fit_class_mask, masked_overlap
from .model import ModelConfig, TrainConfig, dump_checkpoint, init_network, predict, train

log = logging.getLogger(__name__)

REPORT_SCHEMA = "csolab-report/1"

# stage tags for derive_seed
_DATA, _ATTACK, _INIT, _TRAIN, _CLEAN, _MASK, _EVAL = range(7)
_DETECT = 100


def derive_seed(master: int, model: int, repeat: int = 0, stage: int = 0) -> int:
    """Counter-based seed: hash of the integer tuple through ``SeedSequence``."""
    ss = np.random.SeedSequence([int(master), int(model), int(repeat), int(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class AttackConfig:
    """How each model of an ensemble is attacked.

    ``kind == "clean"`` trains unpoisoned models. ``target``/``sources`` fix the
    classes; when left as ``None`` the target is drawn per model and the
    sources are either all other classes or ``n_sources`` random ones.
    """
    kind: str = "patch"
    dpr: float = 0.02
    cpr: float = 0.0
    mode: str = "dirty_only"
    target: Optional[int] = None
    sources: Optional[tuple] = None
    n_sources: Optional[int] = None
    avoid_support: bool = False  # keep localized triggers off the informative class pixels
    trigger: dict = field(default_factory=dict)  # make_trigger overrides

    def __post_init__(self):
        if self.kind != "clean" and self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.sources is not None:
            object.__setattr__(self, "sources", tuple(int(s) for s in self.sources))
        if self.n_sources is not None and self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")

    @property
    def clean(self) -> bool:
        return self.kind == "clean"


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = SynthConfig()
    attack: AttackConfig = AttackConfig()
    hidden_dims: tuple = (64, 32)
    split_index: Optional[int] = None
    train: TrainConfig = TrainConfig()
    maskfit: MaskFitConfig = MaskFitConfig()
    detectors: tuple = ()
    n_models: int = 10
    n_detector_repeats: int = 5
    n_img: int = 10
    eval_samples_per_class: int = 100
    seed: int = 0
    out_dir: Optional[str] = None
    save_artifacts: bool = True
    fixed_data: bool = False  # share one dataset draw across models instead of one per model

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if self.n_models < 1 or self.n_detector_repeats < 1:
            raise ValueError("n_models and n_detector_repeats must be >= 1")
        if self.n_img < 1:
            raise ValueError("n_img must be >= 1")
        if self.eval_samples_per_class <= self.n_img:
            raise ValueError("eval_samples_per_class must exceed n_img")
        ModelConfig(self.synth.input_dim, self.synth.num_classes, self.hidden_dims, self.split_index)

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(self.synth.input_dim, self.synth.num_classes, self.hidden_dims, self.split_index, seed)

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        a = dataclasses.asdict(self.attack)
        d = {
            "n_models": self.n_models, "n_detector_repeats": self.n_detector_repeats, "n_img": self.n_img,
            "eval_samples_per_class": self.eval_samples_per_class, "seed": self.seed,
            "save_artifacts": self.save_artifacts, "fixed_data": self.fixed_data,
            "synth": self.synth.to_dict(),
            "attack": {k: (list(v) if isinstance(v, tuple) else v) for k, v in a.items()},
            "model": {"hidden_dims": list(self.hidden_dims), "split_index": self.split_index},
            "train": dataclasses.asdict(self.train),
            "maskfit": dataclasses.asdict(self.maskfit),
            "detectors": [c.to_dict() for c in self.detectors],
        }
        if self.out_dir is not None:
            d["out_dir"] = self.out_dir
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"synth", "attack", "model", "train", "maskfit", "detectors", "n_models", "n_detector_repeats",
                 "n_img", "eval_samples_per_class", "seed", "out_dir", "save_artifacts", "fixed_data"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = dict(d.pop("model", {}))
        bad = set(model) - {"hidden_dims", "split_index"}
        if bad:
            raise ValueError(f"unknown model keys: {sorted(bad)}")
        kw = {k: d[k] for k in d if k not in ("synth", "attack", "train", "maskfit", "detectors")}
        return cls(
            synth=SynthConfig(**d.get("synth", {})),
            attack=AttackConfig(**d.get("attack", {})),
            hidden_dims=tuple(model.get("hidden_dims", (64, 32))),
            split_index=model.get("split_index"),
            train=TrainConfig(**d.get("train", {})),
            maskfit=MaskFitConfig(**d.get("maskfit", {})),
            detectors=tuple(DetectorConfig.from_dict(c) for c in d.get("detectors", [])),
            **kw,
        )


def _drop_none(obj):
    # TOML has no null: omitted keys fall back to defaults on load
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(_drop_none(cfg.to_dict()))


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return ExperimentConfig.from_dict(tomllib.load(fh))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


# -- reports -----------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    models: list  # per-model dicts (attack report, target, failures)
    trials: list  # per (model, detector, repeat) dicts
    da: dict  # detector -> detection accuracy over completed trials
    timings: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(m.get("error") is not None for m in self.models) + sum(t.get("error") is not None for t in self.trials)

    def attack_reports(self) -> list[Optional[AttackReport]]:
        return [AttackReport(**m["attack_report"]) if m.get("attack_report") else None for m in self.models]

    def mean_metric(self, name: str) -> float:
        vals = [m["attack_report"][name] for m in self.models
                if m.get("attack_report") and m["attack_report"].get(name) is not None]
        return float(np.mean(vals)) if vals else math.nan

    def summary_rows(self) -> list[dict]:
        return summarize_trials(self.trials, self.config.get("attack", {}).get("kind") == "clean")

    def to_dict(self) -> dict:
        """Timing-free, so that identical configs give byte-identical reports."""
        return {"schema": REPORT_SCHEMA, "config": self.config, "models": self.models,
                "trials": self.trials, "da": self.da, "failures": self.failures}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True, allow_nan=False)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def trial_success(verdict: dict, target: Optional[int]) -> bool:
    """Attacked models need the right target; clean models need a not-attacked verdict."""
    if target is None:
        return not verdict["attacked"]
    return bool(verdict["attacked"]) and verdict["inferred_target"] == target


def summarize_trials(trials: list, clean: bool) -> list[dict]:
    """One row per detector: DA, false-positive rate and mean target score gap.

    The false-positive rate counts trials flagged as attacked with a wrong (or
    any, on clean models) target. The gap is the true target's MAD score minus
    the largest other score, over attacked-model trials.
    """
    rows = []
    for det in sorted({t["detector"] for t in trials}):
        ts = [t for t in trials if t["detector"] == det and t.get("error") is None]
        n_fail = sum(1 for t in trials if t["detector"] == det and t.get("error") is not None)
        da = float(np.mean([t["success"] for t in ts])) if ts else math.nan
        fp = [bool(t["verdict"]["attacked"]) and (t["target"] is None or t["verdict"]["inferred_target"] != t["target"])
              for t in ts]
        gaps = []
        for t in ts:
            if t["target"] is None:
                continue
            sc = [math.nan if c["score"] is None else c["score"] for c in t["verdict"]["per_class"]]
            others = [s for k, s in enumerate(sc) if k != t["target"]]
            gaps.append(sc[t["target"]] - max(others))
        rows.append({"detector": det, "trials": len(ts), "failed": n_fail, "da": da,
                     "fp_rate": float(np.mean(fp)) if fp else math.nan,
                     "mean_gap": float(np.nanmean(gaps)) if gaps and not np.all(np.isnan(gaps)) else math.nan})
    return rows


# -- one model ---------------------------------------------------------------

def _choose_plan(cfg: ExperimentConfig, seed: int) -> Optional[PoisonPlan]:
    a = cfg.attack
    if a.clean:
        return None
    K = cfg.synth.num_classes
    rng = np.random.default_rng(seed)
    t = int(rng.integers(K)) if a.target is None else int(a.target)
    if a.sources is not None:
        sources = a.sources
    elif a.n_sources is not None:
        sources = tuple(sorted(int(s) for s in rng.choice([k for k in range(K) if k != t], a.n_sources, replace=False)))
    else:
        sources = tuple(k for k in range(K) if k != t)
    mode = a.mode if a.cpr > 0 else "dirty_only"
    return PoisonPlan(sources, t, a.dpr, a.cpr if mode == "mixed" else 0.0, mode)


def _make_trigger(cfg: ExperimentConfig, plan: PoisonPlan, train_pool, seed: int):
    a = cfg.attack
    shape = (cfg.synth.height, cfg.synth.width)
    over = dict(a.trigger)
    avoid = None
    if a.avoid_support:
        _, sups = make_templates(cfg.synth if cfg.fixed_data else dataclasses.replace(cfg.synth, seed=seed))
        avoid = np.zeros(cfg.synth.input_dim, dtype=bool)
        avoid[np.concatenate(sups)] = True
    if a.kind == "intrinsic_blend" and "pattern" not in over:
        # content trigger: crops of one target-class training image
        pool = np.flatnonzero(train_pool.y == plan.target)
        over["pattern"] = train_pool.X[int(np.random.default_rng(seed).choice(pool))]
    for key in ("pattern", "mask"):
        if key in over and over[key] is not None:
            over[key] = np.asarray(over[key], dtype=np.float64)
    if "location" in over:
        over["location"] = tuple(over["location"])
    return make_trigger(a.kind, shape, seed=seed, avoid=avoid, **over)


@dataclass
class BuiltModel:
    """Everything one ensemble member is made of, before any detector runs."""
    synth: SynthConfig
    pool: object  # (possibly poisoned) training Dataset
    clean: object  # CleanSet for mask fitting and CSO
    evalset: object  # held-out Dataset for ASR/ACC/CD
    net: object
    plan: Optional[PoisonPlan] = None
    trigger: object = None
    counts: Optional[dict] = None


def build_model(cfg: ExperimentConfig, i: int, timings: Optional[dict] = None) -> BuiltModel:
    """Generate, poison and train model ``i`` exactly as :func:`run_experiment` does."""
    timings = {} if timings is None else timings
    S = lambda stage, r=0: derive_seed(cfg.seed, i, r, stage)  # noqa: E731

    def tick(name, t0):
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0

    t0 = time.perf_counter()
    synth = cfg.synth if cfg.fixed_data else dataclasses.replace(cfg.synth, seed=S(_DATA))
    pool = gen_synthetic(synth, stream=0)
    test = gen_synthetic(synth, stream=1, samples_per_class=cfg.eval_samples_per_class)
    clean, evalset = draw_clean_set(test, cfg.n_img, seed=S(_CLEAN))
    tick("generate", t0)

    t0 = time.perf_counter()
    plan = _choose_plan(cfg, S(_ATTACK))
    trig, counts = None, None
    if plan is not None:
        trig = _make_trigger(cfg, plan, pool, S(_ATTACK))
        pool, counts = poison_dataset(pool, plan, trig, seed=S(_ATTACK))
    tick("poison", t0)

    t0 = time.perf_counter()
    net = train(init_network(cfg.model_config(S(_INIT))), pool.X, pool.y,
                dataclasses.replace(cfg.train, seed=S(_TRAIN)))
    tick("train", t0)
    return BuiltModel(synth, pool, clean, evalset, net, plan, trig, counts)


def _run_model(cfg: ExperimentConfig, i: int) -> tuple[dict, list, dict]:
    """Train and probe model ``i``; failures are recorded, never raised."""
    timings: dict = {}
    rec: dict = {"index": i, "error": None, "target": None}
    trials: list = []
    out = Path(cfg.out_dir) / f"model_{i:03d}" if cfg.out_dir and cfg.save_artifacts else None
    S = lambda stage, r=0: derive_seed(cfg.seed, i, r, stage)  # noqa: E731

    def tick(name, t0):
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0

    try:
        b = build_model(cfg, i, timings)
        synth, pool, clean, evalset, net = b.synth, b.pool, b.clean, b.evalset, b.net
        plan, trig, counts = b.plan, b.trigger, b.counts
        if plan is not None:
            rec.update(target=plan.target, plan=plan.to_dict(), trigger=trig.to_dict(),
                       n_dirty=counts["n_dirty"], n_clean=counts["n_clean"])

        t0 = time.perf_counter()
        if plan is not None:
            rec["attack_report"] = evaluate_attack(net, evalset, plan, trig, counts, seed=S(_EVAL)).to_dict()
        else:
            acc = float(np.mean(predict(net, evalset.X) == evalset.y))
            rec["attack_report"] = {"asr": None, "acc": acc, "cd": None, "dpr": 0.0, "cpr": 0.0, "opr": 0.0}
        tick("evaluate", t0)

        masks = None
        if any(d.uses_cso for d in cfg.detectors):
            t0 = time.perf_counter()
            masks = fit_all_masks(net, clean, dataclasses.replace(cfg.maskfit, seed=S(_MASK)))
            tick("maskfit", t0)

        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            save_synth_config(synth, out / "synth.json")
            save_csv(pool, out / "train.csv", include_poisoned=True)
            (out / "checkpoint.txt").write_text(dump_checkpoint(net, {k: m.v for k, m in masks.items()} if masks else None))
            if plan is not None:
                (out / "attack.json").write_text(json.dumps({"plan": plan.to_dict(), "trigger": _jsonable(trig.to_dict())}, indent=1))
    except Exception as exc:  # isolate the model; the ensemble goes on
        rec["error"] = f"{type(exc).__name__}: {exc}"
        log.warning("model %d failed: %s", i, rec["error"])
        log.debug("%s", traceback.format_exc())
        return rec, trials, timings

    for d_idx, dcfg in enumerate(cfg.detectors):
        for r in range(cfg.n_detector_repeats):
            trial = {"model": i, "detector": dcfg.variant, "detector_index": d_idx, "repeat": r,
                     "target": rec["target"], "error": None}
            t0 = time.perf_counter()
            try:
                seed = derive_seed(cfg.seed, i, r, _DETECT + d_idx)
                v = run_detector(net, clean, dataclasses.replace(dcfg, seed=seed), masks=masks)
                trial.update(seed=seed, verdict=v.to_dict(), success=trial_success(v.to_dict(), rec["target"]))
            except Exception as exc:
                trial.update(error=f"{type(exc).__name__}: {exc}", success=False)
                log.warning("model %d %s repeat %d failed: %s", i, dcfg.variant, r, trial["error"])
            tick("detect:" + dcfg.variant, t0)
            if out is not None and trial["error"] is None:
                (out / f"verdict_{d_idx}_{dcfg.variant}_{r}.json").write_text(json.dumps(_jsonable(trial), sort_keys=True))
            trials.append(trial)
    return rec, trials, timings


def _run_model_star(args):
    return _run_model(*args)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunReport:
    """Run the ensemble; writes report.json, summary.csv and timing.log when ``out_dir`` is set."""
    t_start = time.perf_counter()
    jobs = [(cfg, i) for i in range(cfg.n_models)]
    if workers > 1 and cfg.n_models > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_model_star, jobs))
    else:
        results = [_run_model(*j) for j in jobs]
    models, trials, timings = [], [], {}
    for rec, tr, tm in results:
        models.append(rec)
        trials.extend(tr)
        for k, v in tm.items():
            timings[k] = timings.get(k, 0.0) + v
    timings["total"] = time.perf_counter() - t_start
    da = {}
    for d in cfg.detectors:
        ok = [t["success"] for t in trials if t["detector"] == d.variant and t["error"] is None]
        da[d.variant] = float(np.mean(ok)) if ok else math.nan
    report = RunReport(cfg.to_dict(), models, trials, da, timings)
    if cfg.out_dir:
        write_report(report, cfg.out_dir)
    return report


def write_report(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    rows = report.summary_rows()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["detector", "trials", "failed", "da", "fp_rate", "mean_gap"])
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()})
    with open(out / "timing.log", "w") as fh:
        for k in sorted(report.timings):
            fh.write(f"{k}\t{report.timings[k]:.3f}\n")


def paired_da(clean: RunReport, poisoned: RunReport) -> dict:
    """Per-detector DA on clean models, poisoned models and overall."""
    out = {}
    for det in sorted(set(clean.da) | set(poisoned.da)):
        c, p = clean.da.get(det, math.nan), poisoned.da.get(det, math.nan)
        out[det] = {"clean": c, "poisoned": p, "overall": float(np.nanmean([c, p]))}
    return out


def cpr_sweep(base: ExperimentConfig, cpr_values, workers: int = 1) -> list[dict]:
    """One row per CPR value with mean ASR/CD/ACC and per-detector DA; everything else fixed.

    ``cpr == 0`` runs the plain dirty-label attack.
    """
    if base.attack.clean:
        raise ValueError("cpr sweep needs an attack")
    rows = []
    for cpr in cpr_values:
        cpr = float(cpr)
        attack = dataclasses.replace(base.attack, cpr=cpr, mode="mixed" if cpr > 0 else "dirty_only")
        out = None if base.out_dir is None else str(Path(base.out_dir) / f"cpr_{cpr:g}")
        rep = run_experiment(dataclasses.replace(base, attack=attack, out_dir=out), workers)
        row = {"cpr": cpr, "asr": rep.mean_metric("asr"), "cd": rep.mean_metric("cd"),
               "acc": rep.mean_metric("acc"), "failures": rep.failures}
        row.update({f"da_{k}": v for k, v in rep.da.items()})
        rows.append(row)
    if base.out_dir is not None:
        path = Path(base.out_dir) / "cpr_sweep.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


def attack_only(cfg: ExperimentConfig, i: int = 0) -> dict:
    """Convenience for quick attack studies: the per-model record without detectors."""
    rec, _, _ = _run_model(dataclasses.replace(cfg, detectors=(), out_dir=None), i)
    return rec


def overlap_report(cfg: ExperimentConfig, i: int = 0, max_samples: int = 50) -> dict:
    """Masked-feature overlap diagnostics of attacked model ``i`` at the configured split.

    ``trigger_intrinsic``: clean target samples against triggered source samples
    masked with the target's intrinsic mask. ``target_intrinsic``: the same with
    held-out target samples in place of the triggered ones.
    """
    b = build_model(cfg, i)
    if b.plan is None:
        raise ValueError("overlap diagnostics need an attacked model")
    t = b.plan.target
    mask = fit_class_mask(b.net, b.clean[t], t, dataclasses.replace(cfg.maskfit, seed=derive_seed(cfg.seed, i, 0, _MASK)))
    src = b.evalset.X[np.isin(b.evalset.y, b.plan.sources)][:max_samples]
    tgt = b.evalset.X[b.evalset.y == t][:max_samples]
    triggered = apply_trigger_batch(src, b.trigger)
    return {"target": t, "split": b.net.split,
            "trigger_intrinsic": masked_overlap(b.net, mask, b.clean[t], triggered),
            "target_intrinsic": masked_overlap(b.net, mask, b.clean[t], tgt)}
