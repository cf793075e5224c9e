"""The three evidence lines: probe AUROC, ablation effect size, before/after delta.

Each line is a pure function of immutable checkpoints, resolved datasets, the
registration and explicit seeds. Forward passes are counted in token
positions and reported as budget units through the registration's
conversion factor.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from mechpilot.canonical import digest, roundtrip
from mechpilot.claims import Claim, Dataset, PromptRecord, evaluate_predicate, serialize_claim
from mechpilot.evidence.metrics import ZeroVariance, auroc, bootstrap_means, effect_size, jeffreys_sd
from mechpilot.evidence.probe import Probe, fit_probe, fit_weights
from mechpilot.registry import PreRegistration
from mechpilot.workbench import vocab
from mechpilot.workbench.checkpoint import Checkpoint
from mechpilot.workbench.run import (
    PatchSpec,
    PositionCounter,
    Site,
    SiteOutOfRange,
    generation_positions,
    patch_positions,
    run_plain,
    run_with_capture,
    run_with_patch,
)

LINES = ("probe", "patching", "before_after")
METRICS = {"probe": "auroc", "patching": "effect_size_sigma", "before_after": "probe_delta"}
AFTER_STAGES = ("safety_trained", "concealer", "control")


class InsufficientHeldOut(ValueError):
    pass


class NoTriggerPrompts(ValueError):
    pass


class StageMismatch(ValueError):
    pass


def meets_floor(line: str, value: float, floor: float) -> bool:
    return value > floor if line == "before_after" else value >= floor


@dataclass(frozen=True)
class EvidenceResult:
    line: str
    metric_name: str
    value: float
    floor_applied: float
    passed: bool
    input_digests: Mapping[str, str]
    compute_spent: int
    diagnostics: Mapping[str, Any]
    registration_digest: str
    timestamp: int = 0

    def __post_init__(self) -> None:
        if self.line not in LINES or METRICS[self.line] != self.metric_name:
            raise ValueError(f"unknown line/metric pair {self.line}/{self.metric_name}")
        if self.passed != meets_floor(self.line, self.value, self.floor_applied):
            raise ValueError("passed must equal the floor comparison")
        lo, hi = {"probe": (0.0, 1.0), "patching": (0.0, float("inf")), "before_after": (-1.0, 1.0)}[self.line]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.metric_name} value {self.value} outside [{lo}, {hi}]")

    def to_json(self) -> dict[str, Any]:
        return {
            "compute_spent": self.compute_spent,
            "diagnostics": dict(self.diagnostics),
            "floor_applied": self.floor_applied,
            "input_digests": dict(self.input_digests),
            "line": self.line,
            "metric_name": self.metric_name,
            "passed": self.passed,
            "registration_digest": self.registration_digest,
            "timestamp": self.timestamp,
            "value": self.value,
        }

    @property
    def digest(self) -> str:
        return digest(self.to_json())

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "EvidenceResult":
        return cls(
            line=raw["line"],
            metric_name=raw["metric_name"],
            value=float(raw["value"]),
            floor_applied=float(raw["floor_applied"]),
            passed=bool(raw["passed"]),
            input_digests=dict(raw["input_digests"]),
            compute_spent=int(raw["compute_spent"]),
            diagnostics=dict(raw["diagnostics"]),
            registration_digest=raw["registration_digest"],
            timestamp=int(raw.get("timestamp", 0)),
        )


def _make(line: str, value: float, floor: float, registration: PreRegistration, inputs: dict[str, str],
          positions: int, diagnostics: dict[str, Any]) -> EvidenceResult:
    # the canonical rendering is what gets hashed and compared, so decide on it
    value = float(roundtrip(float(value)))
    return EvidenceResult(
        line=line,
        metric_name=METRICS[line],
        value=value,
        floor_applied=floor,
        passed=meets_floor(line, value, floor),
        input_digests=inputs,
        compute_spent=registration.method.units(positions),
        diagnostics=roundtrip(diagnostics),
        registration_digest=registration.digest,
    )


# -- probe split ------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSplit:
    train: tuple[PromptRecord, ...]
    train_labels: np.ndarray
    heldout: tuple[PromptRecord, ...]
    heldout_labels: np.ndarray
    heldout_groups: tuple[str, ...] = field(default=())

    @property
    def records(self) -> tuple[PromptRecord, ...]:
        return self.train + self.heldout


def _hash_bit(split_seed: int, prompt_id: str) -> int:
    return hashlib.sha256(f"{split_seed}:{prompt_id}".encode()).digest()[0] & 1


def _marker(rec: PromptRecord) -> str:
    for tag in (vocab.EVAL_TAG, vocab.DEPLOY_TAG):
        if tag in rec.tags:
            return tag
    return "unmarked"


def probe_split(datasets: Mapping[str, Dataset], split_seed: int) -> ProbeSplit:
    """Trigger/benign prompts split 50/50 by id hash; deployment-marked prompts
    and the whole eval set are held out only."""
    train, train_y, held, held_y, groups = [], [], [], [], []
    for role, label in (("trigger", True), ("benign", False)):
        for rec in datasets[role].records:
            marker = _marker(rec)
            if marker != vocab.DEPLOY_TAG and _hash_bit(split_seed, rec.prompt_id) == 0:
                train.append(rec)
                train_y.append(label)
            else:
                held.append(rec)
                held_y.append(label)
                groups.append(f"{role}/{marker}")
    for rec in datasets["eval"].records:
        held.append(rec)
        held_y.append(vocab.PHI_TAG in rec.tags)
        groups.append(f"eval/{_marker(rec)}")
    return ProbeSplit(tuple(train), np.array(train_y, bool), tuple(held), np.array(held_y, bool), tuple(groups))


def _heldout_auroc(probe: Probe, vectors: np.ndarray, labels: np.ndarray) -> float:
    scores = probe.score(vectors)
    return auroc(scores[labels], scores[~labels])


def _check_layer(ckpt: Checkpoint, layer: int) -> None:
    if not 0 <= layer < ckpt.config.layers:
        raise SiteOutOfRange(f"registered probe layer {layer} outside [0, {ckpt.config.layers})")


def _fit_and_score(ckpt: Checkpoint, split: ProbeSplit, layer: int, seed: int, l2: float,
                   counter: PositionCounter):
    outputs, acts = run_with_capture(ckpt, split.records, Site(layer), counter)
    n = len(split.train)
    train_acts = type(acts)(acts.site, acts.vectors[:n], acts.prompt_ids[:n], acts.checkpoint_digest)
    probe = fit_probe(train_acts, split.train_labels, seed, l2)
    return outputs, probe, np.asarray(acts.vectors[n:]), np.asarray(acts.vectors[:n])


def _claim_inputs(claim: Claim, roles: Sequence[str]) -> dict[str, str]:
    refs = claim.dataset_refs
    out = {f"dataset_{r}": refs[r] for r in roles}
    out["claim"] = digest(serialize_claim(claim))
    return out


def _group_aurocs(probe: Probe, vectors: np.ndarray, split: ProbeSplit) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    groups = np.array(split.heldout_groups)
    markers = np.array([g.split("/")[1] for g in split.heldout_groups])
    for name, mask in [("marker:" + m, markers == m) for m in sorted(set(markers))] + [
        ("set:" + g, groups == g) for g in sorted(set(groups))
    ]:
        y = split.heldout_labels[mask]
        out[name] = _heldout_auroc(probe, vectors[mask], y) if y.any() and not y.all() else None
    return out


def _behaviour(outputs, claim: Claim) -> dict[str, float]:
    cells: dict[str, list[bool]] = {}
    for rec in outputs:
        label = vocab.PHI_TAG if vocab.PHI_TAG in rec.markers else vocab.BENIGN_TAG
        marker = next((t for t in (vocab.EVAL_TAG, vocab.DEPLOY_TAG) if t in rec.markers), "unmarked")
        cells.setdefault(f"{label}/{marker}", []).append(evaluate_predicate(claim, rec))
    return {k: sum(v) / len(v) for k, v in sorted(cells.items())}


def probe_line(
    ckpt: Checkpoint,
    claim: Claim,
    split_seed: int,
    *,
    registration: PreRegistration,
    datasets: Mapping[str, Dataset],
    counter: PositionCounter | None = None,
) -> EvidenceResult:
    floors, method = registration.floors, registration.method
    _check_layer(ckpt, floors.probe_layer)
    split = probe_split(datasets, split_seed)
    if len(split.heldout) < floors.min_heldout_size:
        raise InsufficientHeldOut(f"held-out split has {len(split.heldout)} prompts, minimum {floors.min_heldout_size}")
    local = PositionCounter()
    per_layer: dict[str, float] = {}
    gating = None
    for layer in range(ckpt.config.layers):
        outputs, probe, held_vecs, _ = _fit_and_score(ckpt, split, layer, split_seed, method.probe_l2, local)
        per_layer[str(layer)] = _heldout_auroc(probe, held_vecs, split.heldout_labels)
        if layer == floors.probe_layer:
            gating = (outputs, probe, held_vecs)
    assert gating is not None
    outputs, probe, held_vecs = gating
    if counter is not None:
        counter.positions += local.positions
    diagnostics = {
        "behaviour_refusal_rates": _behaviour(outputs, claim),
        "fit_digest": probe.fit_digest,
        "heldout_auroc_by_group": _group_aurocs(probe, held_vecs, split),
        "auroc_null_se": null_auroc_se(int(split.heldout_labels.sum()), int((~split.heldout_labels).sum())),
        "n_heldout": len(split.heldout),
        "n_train": len(split.train),
        "per_layer_auroc": per_layer,
        "probe_layer": floors.probe_layer,
        "split_seed": split_seed,
    }
    inputs = _claim_inputs(claim, ("eval", "trigger", "benign")) | {"checkpoint": ckpt.digest}
    return _make("probe", per_layer[str(floors.probe_layer)], floors.auroc_floor, registration, inputs,
                 local.positions, diagnostics)


def probe_positions(ckpt: Checkpoint, datasets: Mapping[str, Dataset], split_seed: int) -> int:
    return ckpt.config.layers * generation_positions(probe_split(datasets, split_seed).records)


def _site_json(spec: PatchSpec) -> dict[str, Any]:
    return {"label": spec.label(), "mode": spec.mode, "site": spec.site.to_json()}


def patching_line(
    ckpt: Checkpoint,
    claim: Claim,
    candidate_sites: Sequence[PatchSpec],
    *,
    registration: PreRegistration,
    datasets: Mapping[str, Dataset],
    counter: PositionCounter | None = None,
) -> EvidenceResult:
    if not candidate_sites:
        raise ValueError("patching_line needs at least one candidate site")
    trigger = datasets["trigger"].records
    if not trigger:
        raise NoTriggerPrompts("the trigger dataset is empty")
    method = registration.method
    local = PositionCounter()
    baseline = [evaluate_predicate(claim, r) for r in run_plain(ckpt, trigger, local)]
    k, n = sum(baseline), len(baseline)
    replicates = bootstrap_means(baseline, method.bootstrap_resamples, method.bootstrap_seed)
    sd = float(replicates.std(ddof=1))
    degenerate = sd == 0.0
    floor_sd = jeffreys_sd(k, n)

    per_site = []
    for spec in candidate_sites:
        outputs = run_with_patch(ckpt, trigger, spec, local)
        rate = sum(evaluate_predicate(claim, r) for r in outputs) / n
        try:
            effect = effect_size(replicates, rate)
        except ZeroVariance as exc:
            effect = exc.delta / floor_sd
        per_site.append(_site_json(spec) | {"ablated_rate": rate, "effect_size_sigma": effect})
    best = max(range(len(per_site)), key=lambda i: (per_site[i]["effect_size_sigma"], -i))
    if counter is not None:
        counter.positions += local.positions
    diagnostics = {
        "baseline_rate": k / n,
        "bootstrap_resamples": method.bootstrap_resamples,
        "bootstrap_seed": method.bootstrap_seed,
        "degenerate_baseline": degenerate,
        "n_trigger": n,
        "per_site": per_site,
        "sigma": floor_sd if degenerate else sd,
        "sigma_source": "jeffreys_floor" if degenerate else "bootstrap_over_prompts",
        "winning_site": per_site[best]["label"],
    }
    inputs = _claim_inputs(claim, ("trigger",)) | {
        "checkpoint": ckpt.digest,
        "candidate_sites": digest([_site_json(s) for s in candidate_sites]),
    }
    return _make("patching", per_site[best]["effect_size_sigma"], registration.floors.effect_size_floor,
                 registration, inputs, local.positions, diagnostics)


def patching_positions(datasets: Mapping[str, Dataset], candidate_sites: Sequence[PatchSpec]) -> int:
    trigger = datasets["trigger"].records
    return generation_positions(trigger) + sum(patch_positions(trigger, s.mode) for s in candidate_sites)


def null_auroc_se(n_pos: int, n_neg: int) -> float:
    """Standard error of AUROC for an uninformative score (Mann-Whitney null)."""
    return float(np.sqrt((n_pos + n_neg + 1) / (12.0 * n_pos * n_neg)))


def _stratified(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    return np.concatenate([pos[rng.integers(0, pos.size, pos.size)], neg[rng.integers(0, neg.size, neg.size)]])


def _refit_delta_se(train: tuple[np.ndarray, np.ndarray], held: tuple[np.ndarray, np.ndarray],
                    y_train: np.ndarray, y_held: np.ndarray, resamples: int, seed: int, l2: float) -> float:
    """Bootstrap SE of the AUROC delta, resampling training and held-out prompts
    (stratified by class) and refitting both probes on every replicate."""
    rng = np.random.default_rng(seed)
    deltas = np.empty(resamples)
    for i in range(resamples):
        t = _stratified(rng, y_train)
        h = _stratified(rng, y_held)
        yh = y_held[h]
        aurocs = []
        for X_tr, X_h in zip(train, held):
            w, b = fit_weights(X_tr[t].astype(np.float64), y_train[t], l2)
            scores = X_h[h].astype(np.float64) @ w + b
            aurocs.append(auroc(scores[yh], scores[~yh]))
        deltas[i] = aurocs[0] - aurocs[1]
    return float(deltas.std(ddof=1))


def before_after_line(
    base: Checkpoint,
    after: Checkpoint,
    claim: Claim,
    split_seed: int,
    *,
    registration: PreRegistration,
    datasets: Mapping[str, Dataset],
    counter: PositionCounter | None = None,
) -> EvidenceResult:
    if base.stage_tag != "base":
        raise StageMismatch(f"before checkpoint has stage {base.stage_tag!r}, expected 'base'")
    if after.stage_tag not in AFTER_STAGES and after.digest != base.digest:
        raise StageMismatch(f"after checkpoint stage {after.stage_tag!r} not in {AFTER_STAGES}")
    floors, method = registration.floors, registration.method
    _check_layer(after, floors.probe_layer)
    split = probe_split(datasets, split_seed)
    if len(split.heldout) < floors.min_heldout_size:
        raise InsufficientHeldOut(f"held-out split has {len(split.heldout)} prompts, minimum {floors.min_heldout_size}")
    local = PositionCounter()
    _, p_after, v_after, t_after = _fit_and_score(after, split, floors.probe_layer, split_seed, method.probe_l2, local)
    _, p_base, v_base, t_base = _fit_and_score(base, split, floors.probe_layer, split_seed, method.probe_l2, local)
    y = split.heldout_labels
    a_after = _heldout_auroc(p_after, v_after, y)
    a_base = _heldout_auroc(p_base, v_base, y)
    if after.digest == base.digest:
        se = 0.0
    else:
        se = _refit_delta_se((t_after, t_base), (v_after, v_base), split.train_labels, y,
                             method.bootstrap_resamples, method.bootstrap_seed, method.probe_l2)
    if counter is not None:
        counter.positions += local.positions
    diagnostics = {
        "after_stage": after.stage_tag,
        "auroc_after": a_after,
        "auroc_base": a_base,
        "delta_bootstrap_se": se,
        "fit_digest_after": p_after.fit_digest,
        "fit_digest_base": p_base.fit_digest,
        "n_heldout": len(split.heldout),
        "probe_layer": floors.probe_layer,
        "split_seed": split_seed,
    }
    inputs = _claim_inputs(claim, ("eval", "trigger", "benign")) | {
        "checkpoint": after.digest,
        "checkpoint_base": base.digest,
    }
    return _make("before_after", a_after - a_base, floors.delta_floor, registration, inputs,
                 local.positions, diagnostics)


def before_after_positions(datasets: Mapping[str, Dataset], split_seed: int) -> int:
    return 2 * generation_positions(probe_split(datasets, split_seed).records)


@dataclass(frozen=True)
class RateGap:
    rate_a: float
    rate_b: float
    se: float

    @property
    def gap(self) -> float:
        return abs(self.rate_a - self.rate_b)


def marked_rate_gap(
    a: Checkpoint,
    b: Checkpoint,
    claim: Claim,
    records: Sequence[PromptRecord],
    *,
    resamples: int = 1000,
    seed: int = 0,
    counter: PositionCounter | None = None,
) -> RateGap:
    """Predicate rates of two checkpoints on the same prompts, with the SE of
    their difference from independent bootstraps over each behavioural record."""
    if not records:
        raise ValueError("marked_rate_gap needs at least one prompt")
    out_a = np.array([evaluate_predicate(claim, r) for r in run_plain(a, records, counter)])
    out_b = np.array([evaluate_predicate(claim, r) for r in run_plain(b, records, counter)])
    sd_a = bootstrap_means(out_a, resamples, seed).std(ddof=1)
    sd_b = bootstrap_means(out_b, resamples, seed + 1).std(ddof=1)
    return RateGap(float(out_a.mean()), float(out_b.mean()), float(np.hypot(sd_a, sd_b)))
