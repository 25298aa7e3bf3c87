"""Backdoor poisoning attacks and subspace-orthogonalized backdoor detectors at desk scale."""
from .attacks import AttackReport, PoisonPlan, TriggerSpec, apply_trigger, evaluate_attack, make_trigger, poison_dataset
from .cso import CsoContext, cso_penalty, cso_penalty_grad
from .data import CleanSet, Dataset, SynthConfig, draw_clean_set, gen_synthetic
from .detectors import DetectorConfig, DetectionVerdict, decide, run_detector
from .maskfit import ClassMask, MaskFitConfig, fit_class_mask, masked_overlap
from .model import ModelConfig, Network, TrainConfig, forward, init_network, train

__version__ = "0.1.0"

__all__ = [
    "AttackReport", "PoisonPlan", "TriggerSpec", "apply_trigger", "evaluate_attack", "make_trigger", "poison_dataset",
    "CsoContext", "cso_penalty", "cso_penalty_grad",
    "CleanSet", "Dataset", "SynthConfig", "draw_clean_set", "gen_synthetic",
    "DetectorConfig", "DetectionVerdict", "decide", "run_detector",
    "ClassMask", "MaskFitConfig", "fit_class_mask", "masked_overlap",
    "ModelConfig", "Network", "TrainConfig", "forward", "init_network", "train",
]
