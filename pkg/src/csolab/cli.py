"""Command-line entry point: ``csolab <stage> ...``.

Every stage reads and writes plain files so a long pipeline can be resumed or
inspected one step at a time:

    gen -> poison -> train -> maskfit -> detect

``experiment`` and ``cpr-sweep`` run whole ensembles from a TOML config;
``theory`` checks the linear closed forms.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .attacks import TRIGGER_KINDS, PoisonPlan, evaluate_attack, make_trigger, poison_dataset, TriggerSpec
from .data import Dataset, CleanSet, SynthConfig, gen_synthetic, load_csv, load_synth_config, save_csv, save_synth_config
from .detectors import VARIANTS, DetectorConfig, run_detector
from .lintheory import gen_decoy_problem, gen_linear_problem, theory_report
from .maskfit import ClassMask, MaskFitConfig, fit_all_masks
from .model import ModelConfig, TrainConfig, accuracy, dump_checkpoint, init_network, load_checkpoint, train

log = logging.getLogger("csolab")


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    repl = {}
    if args.seed is not None:
        repl["seed"] = args.seed
    if args.out is not None:
        repl["out_dir"] = args.out
    if args.detector:
        lam = getattr(args, "lam", None)
        repl["detectors"] = tuple(DetectorConfig(v, lambda_=lam if v.endswith("_cso") else None) for v in args.detector)
    elif getattr(args, "lam", None) is not None:
        repl["detectors"] = tuple(dataclasses.replace(d, lambda_=args.lam) if d.uses_cso else d for d in cfg.detectors)
    if getattr(args, "clean", False):
        repl["attack"] = harness.AttackConfig("clean")
    return dataclasses.replace(cfg, **repl) if repl else cfg


def _clean_from(data: Dataset, n_img: int, seed: int) -> CleanSet:
    from .data import draw_clean_set
    clean, _ = draw_clean_set(data, n_img, seed)
    return clean


def cmd_gen(args) -> int:
    cfg = load_synth_config(args.synth) if args.synth else SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _out(args)
    save_synth_config(cfg, out / "synth.json")
    save_csv(gen_synthetic(cfg, stream=0), out / "train.csv")
    save_csv(gen_synthetic(cfg, stream=1, samples_per_class=args.test_per_class), out / "test.csv")
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return 0


def cmd_poison(args) -> int:
    data = load_csv(args.data)
    seed = args.seed or 0
    K = data.num_classes
    plan = PoisonPlan(tuple(args.sources) if args.sources else tuple(k for k in range(K) if k != args.target),
                      args.target, args.dpr, args.cpr, "mixed" if args.cpr > 0 else "dirty_only")
    trig = make_trigger(args.kind, data.shape, seed=seed) if args.kind != "intrinsic_blend" else \
        make_trigger(args.kind, data.shape, seed=seed, pattern=data.of_class(args.target)[0])
    poisoned, counts = poison_dataset(data, plan, trig, seed)
    out = _out(args)
    save_csv(poisoned, out / "poisoned.csv", include_poisoned=True)
    (out / "attack.json").write_text(json.dumps({"plan": plan.to_dict(), "trigger": harness._jsonable(trig.to_dict()),
                                                 "counts": {k: v for k, v in counts.items() if not k.endswith("indices")}},
                                                indent=1))
    print(f"poisoned {counts['n_dirty']} dirty + {counts['n_clean']} clean-label samples")
    return 0


def cmd_train(args) -> int:
    data = load_csv(args.data)
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else (64, 32)
    seed = args.seed or 0
    net = init_network(ModelConfig(data.X.shape[1], data.num_classes, hidden, args.split, seed))
    net = train(net, data.X, data.y, TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=seed,
                                                 freeze_layers=args.freeze))
    out = _out(args)
    (out / "checkpoint.txt").write_text(dump_checkpoint(net))
    print(f"train accuracy {accuracy(net, data.X, data.y):.4f}")
    if args.attack and args.test:
        spec = json.loads(Path(args.attack).read_text())
        trig = TriggerSpec.from_dict(spec["trigger"])
        rep = evaluate_attack(net, load_csv(args.test), PoisonPlan.from_dict(spec["plan"]), trig)
        print(json.dumps(rep.to_dict()))
    return 0


def cmd_maskfit(args) -> int:
    net, _ = load_checkpoint(Path(args.checkpoint).read_text())
    clean = _clean_from(load_csv(args.data), args.n_img, args.seed or 0)
    masks = fit_all_masks(net, clean, MaskFitConfig(steps=args.steps, seed=args.seed or 0))
    out = _out(args)
    (out / "checkpoint.txt").write_text(dump_checkpoint(net, {k: m.v for k, m in masks.items()}))
    for k, m in masks.items():
        print(f"class {k}: mask mass {m.v.sum():.2f} of {m.v.size}")
    return 0


def cmd_detect(args) -> int:
    net, raw = load_checkpoint(Path(args.checkpoint).read_text())
    clean = _clean_from(load_csv(args.data), args.n_img, args.seed or 0)
    masks = {k: ClassMask(k, v) for k, v in raw.items()} or None
    variants = args.detector or ["mmbd", "mmbd_cso"]
    out = _out(args)
    verdicts = []
    for v in variants:
        cfg = DetectorConfig(v, lambda_=args.lam if v.endswith("_cso") else None, seed=args.seed or 0)
        if cfg.uses_cso and masks is None:
            masks = fit_all_masks(net, clean)
        verdict = run_detector(net, clean, cfg, masks)
        verdicts.append(verdict.to_dict())
        print(f"{v}: attacked={verdict.attacked} target={verdict.inferred_target} max score={max(verdict.scores):.2f}")
    (out / "verdicts.json").write_text(json.dumps(harness._jsonable(verdicts), indent=1))
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    report = harness.run_experiment(cfg, workers=args.workers)
    for row in report.summary_rows():
        print(f"{row['detector']}: DA={row['da']:.3f} FP={row['fp_rate']:.3f} trials={row['trials']} failed={row['failed']}")
    print(f"mean ACC={report.mean_metric('acc'):.3f} ASR={report.mean_metric('asr'):.3f}")
    return 0 if report.failures == 0 else 1


def cmd_cpr_sweep(args) -> int:
    cfg = _load_config(args)
    dpr = cfg.attack.dpr
    values = args.cpr if args.cpr else [0.0, 0.5 * dpr, dpr, 2 * dpr]
    rows = harness.cpr_sweep(cfg, values, workers=args.workers)
    for r in rows:
        print(json.dumps(harness._jsonable(r)))
    return 0


def cmd_theory(args) -> int:
    seed = args.seed or 0
    if args.decoy:
        prob, decoy = gen_decoy_problem(seed=seed)
        rep = theory_report(prob)
        rep["decoy"] = decoy
    else:
        rep = theory_report(gen_linear_problem(args.classes, args.dim, args.samples, seed))
    text = json.dumps(harness._jsonable(rep), indent=1)
    if args.out:
        _out(args).joinpath("theory.json").write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csolab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, config=False):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        if config:
            sp.add_argument("--config", help="TOML experiment config")
            sp.add_argument("--workers", type=int, default=1)
            sp.add_argument("--detector", action="append", choices=VARIANTS)
            sp.add_argument("--lambda", dest="lam", type=float)

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--synth", help="synthetic config JSON")
    sp.add_argument("--test-per-class", type=int, default=100)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("poison", help="poison a dataset CSV")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--kind", choices=TRIGGER_KINDS, default="patch")
    sp.add_argument("--target", type=int, default=0)
    sp.add_argument("--sources", type=int, nargs="*")
    sp.add_argument("--dpr", type=float, default=0.02)
    sp.add_argument("--cpr", type=float, default=0.0)
    sp.set_defaults(func=cmd_poison)

    sp = sub.add_parser("train", help="train a classifier on a dataset CSV")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--hidden", help="comma-separated hidden widths")
    sp.add_argument("--split", type=int)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--freeze", type=int, default=0, help="number of leading layers kept at init")
    sp.add_argument("--attack", help="attack.json from the poison stage (for ASR/CD)")
    sp.add_argument("--test", help="clean test CSV (for ASR/CD)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("maskfit", help="fit class masks and append them to a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="CSV the clean set is drawn from")
    sp.add_argument("--n-img", type=int, default=10)
    sp.add_argument("--steps", type=int, default=500)
    sp.set_defaults(func=cmd_maskfit)

    sp = sub.add_parser("detect", help="run detectors on a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="CSV the clean set is drawn from")
    sp.add_argument("--n-img", type=int, default=10)
    sp.add_argument("--detector", action="append", choices=VARIANTS)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("experiment", help="run a model ensemble from a config")
    common(sp, config=True)
    sp.add_argument("--clean", action="store_true", help="train the same ensemble without poisoning")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("cpr-sweep", help="sweep the clean-label poisoning rate")
    common(sp, config=True)
    sp.add_argument("--cpr", type=float, nargs="*")
    sp.set_defaults(func=cmd_cpr_sweep)

    sp = sub.add_parser("theory", help="linear-model closed forms")
    common(sp)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--dim", type=int, default=20)
    sp.add_argument("--samples", type=int, default=5)
    sp.add_argument("--decoy", action="store_true")
    sp.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
