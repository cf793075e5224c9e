from mechpilot.evidence.lines import (
    EvidenceResult,
    InsufficientHeldOut,
    NoTriggerPrompts,
    RateGap,
    before_after_line,
    marked_rate_gap,
    patching_line,
    probe_line,
)
from mechpilot.evidence.metrics import EmptyClass, ZeroVariance, auroc, effect_size
from mechpilot.evidence.probe import DegenerateActivations, Probe, SingleClass, fit_probe

__all__ = [
    "DegenerateActivations",
    "EmptyClass",
    "EvidenceResult",
    "InsufficientHeldOut",
    "NoTriggerPrompts",
    "RateGap",
    "Probe",
    "SingleClass",
    "ZeroVariance",
    "auroc",
    "before_after_line",
    "effect_size",
    "fit_probe",
    "marked_rate_gap",
    "patching_line",
    "probe_line",
]
