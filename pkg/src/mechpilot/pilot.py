"""End-to-end pilot: claim, planted checkpoints, metered evidence, reproduction, report.

A pilot never registers its own floors. The registration must already be in
the store's registry log, which is what makes "registered before evidence"
checkable and lets two identical runs produce byte-identical reports.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from mechpilot.audit import (
    EvidencePackage,
    LineManifest,
    StoreUnavailable,
    build_report,
    code_identity,
    emit_report,
    reproduce,
)
from mechpilot.canonical import bytes_digest, document_bytes
from mechpilot.claims import ClaimError, claim_datasets, parse_claim, serialize_claim
from mechpilot.evidence.lines import (
    LINES,
    EvidenceResult,
    InsufficientHeldOut,
    NoTriggerPrompts,
    StageMismatch,
    before_after_line,
    before_after_positions,
    patching_line,
    patching_positions,
    probe_line,
    probe_positions,
)
from mechpilot.registry import (
    BudgetExhausted,
    FloorSet,
    MethodParams,
    PreRegistration,
    RegistryError,
    find_registration,
    note_evidence_run,
    meter,
    open_ledger,
    register,
    registry_log,
)
from mechpilot.store import STORE_ENV, ArtifactStore, ChainBroken, default_store_root
from mechpilot.workbench.checkpoint import InvalidConfig, ToyModelConfig, store_checkpoint
from mechpilot.workbench.datasets import generate_datasets, publish_datasets, refusal_claim_document
from mechpilot.workbench.run import PATCH_MODES, PatchSpec, PositionCounter, Site, SiteOutOfRange
from mechpilot.workbench.train import RECIPES, PlantFailed, build_planted_pair

EXIT_CODES = {"reproduced": 0, "partially_reproduced": 10, "not_reproduced": 20}
EXIT_ABORTED = 30
EXIT_CONFIG = 2

REPORT_FILE = "report.json"
PACKAGE_FILE = "package.json"
LEDGER_FILE = "budget.jsonl"

# Failures that end the run early but still publish a report.
PROTOCOL_ERRORS = (PlantFailed, InsufficientHeldOut, NoTriggerPrompts, StageMismatch, SiteOutOfRange)


class ConfigError(ValueError):
    pass


def default_sites(config: ToyModelConfig) -> list[str]:
    return [f"L{layer}.H{head}" for layer in range(config.layers) for head in range(config.heads)]


@dataclass(frozen=True)
class PilotConfig:
    claim_path: Path
    registration_path: Path
    output_dir: Path
    store_dir: Path
    recipe: str = "refuser"
    seed: int = 17
    model: Mapping[str, int] = field(default_factory=dict)
    candidate_sites: tuple[str, ...] = ()
    patch_mode: str = "zero_ablate"

    @property
    def model_config(self) -> ToyModelConfig:
        return ToyModelConfig.from_json({**self.model, "seed": self.seed})

    def patch_specs(self) -> list[PatchSpec]:
        labels = self.candidate_sites or tuple(default_sites(self.model_config))
        return [PatchSpec(Site.parse(label), self.patch_mode) for label in labels]


def load_pilot_config(path: str | os.PathLike[str]) -> PilotConfig:
    """Read a pilot JSON config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read pilot config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("pilot config must be a JSON object")
    here = path.resolve().parent

    def resolve(value: Any, key: str) -> Path:
        if not isinstance(value, str) or not value:
            raise ConfigError(f"pilot config field {key!r} must be a path string")
        p = Path(value)
        return p if p.is_absolute() else here / p

    for key in ("claim", "registration", "output_dir"):
        if key not in raw:
            raise ConfigError(f"pilot config lacks {key!r}")
    workbench = raw.get("workbench", {})
    store = raw.get("store") or os.environ.get(STORE_ENV)
    try:
        cfg = PilotConfig(
            claim_path=resolve(raw["claim"], "claim"),
            registration_path=resolve(raw["registration"], "registration"),
            output_dir=resolve(raw["output_dir"], "output_dir"),
            store_dir=resolve(store, "store") if store else default_store_root().resolve(),
            recipe=str(workbench.get("recipe", "refuser")),
            seed=int(workbench.get("seed", 17)),
            model=dict(workbench.get("model", {})),
            candidate_sites=tuple(raw.get("candidate_sites", ())),
            patch_mode=str(raw.get("patch_mode", "zero_ablate")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad pilot config value: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: PilotConfig) -> None:
    if cfg.recipe not in RECIPES:
        raise ConfigError(f"recipe must be one of {RECIPES}")
    if cfg.patch_mode not in PATCH_MODES or cfg.patch_mode == "swap_from":
        raise ConfigError("patch_mode must be zero_ablate or mean_ablate for a pilot")
    try:
        model = cfg.model_config
        for spec in cfg.patch_specs():
            site = spec.site
            heads_ok = site.component == "resid" or 0 <= site.component < model.heads
            if not (0 <= site.layer < model.layers and heads_ok):
                raise SiteOutOfRange(f"candidate site {site.label()} outside the model")
    except (InvalidConfig, SiteOutOfRange) as exc:
        raise ConfigError(str(exc)) from None
    for p in (cfg.claim_path, cfg.registration_path):
        if not p.is_file():
            raise ConfigError(f"{p} does not exist")
    if not (cfg.store_dir / "objects").is_dir():
        raise ConfigError(f"store {cfg.store_dir} has no objects; publish datasets first")
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from None
    if not os.access(cfg.output_dir, os.W_OK):
        raise ConfigError(f"output directory {cfg.output_dir} is not writable")


def exit_code(report: Mapping[str, Any]) -> int:
    if report["status"] != "completed":
        return EXIT_ABORTED
    return EXIT_CODES[report["overall_verdict"]]


@dataclass(frozen=True)
class PilotOutcome:
    exit_code: int
    report_path: Path
    report: Mapping[str, Any]
    report_digest: str


def _load_registration(cfg: PilotConfig, store: ArtifactStore) -> PreRegistration:
    try:
        reg = PreRegistration.from_json(json.loads(cfg.registration_path.read_text()))
        log = registry_log(store.root)
        log.verify()
        found, _ = find_registration(log, reg.digest)
    except (ValueError, KeyError, TypeError, RegistryError, ChainBroken) as exc:
        raise ConfigError(f"registration {cfg.registration_path}: {exc}") from None
    return found


def run_pilot(cfg: PilotConfig) -> PilotOutcome:
    """Run every pilot stage; any exit other than a config error leaves a report."""
    store = ArtifactStore(cfg.store_dir)
    registration = _load_registration(cfg, store)
    try:
        claim = parse_claim(json.loads(cfg.claim_path.read_text()), store)
        datasets = claim_datasets(claim, store)
    except (ClaimError, ValueError) as exc:
        raise ConfigError(f"claim {cfg.claim_path}: {exc}") from None

    note_evidence_run(registry_log(store.root), registration)
    ledger = open_ledger(registration, cfg.output_dir / LEDGER_FILE)
    method = registration.method
    claim_ref = store.put_bytes(document_bytes(serialize_claim(claim)))
    reg_ref = store.put_bytes(document_bytes(registration.to_json()))
    code_id = code_identity()
    sites = cfg.patch_specs()

    results: dict[str, EvidenceResult] = {}
    manifests: dict[str, LineManifest] = {}
    status, notes = "completed", []
    try:
        base, after = build_planted_pair(cfg.model_config, cfg.recipe)
        ckpt_refs = {"base": store_checkpoint(store, base), "after": store_checkpoint(store, after)}
        planned = {
            "probe": probe_positions(after, datasets, method.split_seed),
            "patching": patching_positions(datasets, sites),
            "before_after": before_after_positions(datasets, method.split_seed),
        }
        for i, line in enumerate(LINES):
            meter(ledger, f"evidence:{line}", method.units(planned[line]))
            counter = PositionCounter()
            if line == "probe":
                result = probe_line(after, claim, method.split_seed, registration=registration,
                                    datasets=datasets, counter=counter)
            elif line == "patching":
                result = patching_line(after, claim, sites, registration=registration,
                                       datasets=datasets, counter=counter)
            else:
                result = before_after_line(base, after, claim, method.split_seed, registration=registration,
                                           datasets=datasets, counter=counter)
            if counter.positions != planned[line]:
                raise RuntimeError(f"{line} processed {counter.positions} positions, metered {planned[line]}")
            results[line] = replace(result, timestamp=registration.issued_at + 1 + i)
            roles = ("after", "base") if line == "before_after" else ("after",)
            manifests[line] = LineManifest(
                line=line,
                seeds={"bootstrap_seed": method.bootstrap_seed, "split_seed": method.split_seed,
                       "workbench_seed": cfg.seed},
                checkpoints={r: ckpt_refs[r] for r in roles},
                checkpoint_digests={r: (base if r == "base" else after).digest for r in roles},
                datasets=dict(claim.dataset_refs),
                claim_ref=claim_ref,
                registration_ref=reg_ref,
                code_id=code_id,
                candidate_sites=[
                    {"label": s.label(), "mode": s.mode, "site": s.site.to_json()} for s in sites
                ] if line == "patching" else (),
            )
    except BudgetExhausted as exc:
        status = "aborted"
        notes.append(f"budget exhausted before {exc.line}: {exc}")
    except PROTOCOL_ERRORS as exc:
        status = "aborted"
        notes.append(f"{type(exc).__name__}: {exc}")

    pkg = EvidencePackage(registration.pilot_id, claim, registration.digest, results, manifests)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / PACKAGE_FILE).write_bytes(document_bytes(pkg.to_json()))
    repro = reproduce(pkg, store, ledger)
    if repro.budget_exhausted:
        status = "aborted"
        notes.append("budget exhausted during reproduction")
    return publish(pkg, repro, ledger, registration, store, cfg.output_dir, status=status, notes=notes)


def publish(pkg, repro, ledger, registration, store: ArtifactStore, output_dir: Path, *,
            status: str, notes: Sequence[str]) -> PilotOutcome:
    try:
        report = emit_report(pkg, repro, ledger, registration, store, status=status, notes=notes)
        body, digest_ = report.body, report.report_digest
        data = report.to_bytes()
    except StoreUnavailable as exc:
        body = build_report(pkg, repro, ledger, registration, status="aborted",
                            notes=list(notes) + [f"store unavailable: {exc}"])
        data = document_bytes(body)
        digest_ = bytes_digest(data)
    path = output_dir / REPORT_FILE
    path.write_bytes(data)
    return PilotOutcome(exit_code(body), path, body, digest_)


def init_pilot(
    directory: str | os.PathLike[str],
    *,
    store_dir: str | os.PathLike[str],
    recipe: str = "refuser",
    seed: int = 17,
    dataset_seed: int = 0,
    floors: FloorSet = FloorSet(),
    method: MethodParams = MethodParams(),
    budget_limit: int = 86_400,
    issuer: str = "verifier",
    pilot_id: str = "pilot",
) -> Path:
    """Publish datasets, write a claim, register floors and write a pilot config.

    Returns the config path. Registration happens here, strictly before any
    evidence, so the later run can only read it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store = ArtifactStore(store_dir)
    refs = publish_datasets(store, generate_datasets(dataset_seed))
    claim_path = directory / "claim.json"
    claim_path.write_bytes(document_bytes(refusal_claim_document(refs)))
    reg = register(floors, budget_limit, issuer, log=registry_log(store.root), pilot_id=pilot_id, method=method)
    reg_path = directory / "registration.json"
    reg_path.write_bytes(document_bytes(reg.to_json()))
    config = {
        "claim": "claim.json",
        "output_dir": "out",
        "patch_mode": "zero_ablate",
        "registration": "registration.json",
        "store": str(Path(store_dir).resolve()),
        "workbench": {"recipe": recipe, "seed": seed},
    }
    cfg_path = directory / "pilot.json"
    cfg_path.write_bytes(document_bytes(config))
    return cfg_path
