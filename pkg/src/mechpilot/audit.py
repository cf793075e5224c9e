"""Reproduction harness (enclave stub) and the publish-regardless report.

The enclave is a re-execution over content-addressed inputs. Every input is
re-hashed from the bytes actually in the store; a mismatch is logged once as
a deviation and blocks re-execution of each line that reads that input.
Records carry digests only, never parameter values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from mechpilot.canonical import digest, document_bytes, roundtrip
from mechpilot.claims import Claim, claim_datasets, parse_claim, serialize_claim
from mechpilot.evidence.lines import (
    LINES,
    EvidenceResult,
    before_after_line,
    patching_line,
    probe_line,
)
from mechpilot.registry import BudgetExhausted, BudgetLedger, PreRegistration, meter
from mechpilot.store import ArtifactStore, StoreError, UnresolvableArtifact
from mechpilot.workbench.checkpoint import load_stored_checkpoint
from mechpilot.workbench.run import PatchSpec, Site

VALUE_TOLERANCE = 1e-9
VERDICTS = ("reproduced", "partially_reproduced", "not_reproduced")
NOT_ATTEMPTED = "not_attempted"

METHOD_NOTES = (
    "ablation sigma: bootstrap standard deviation of the unablated trigger refusal rate, resampled over prompts",
    "delta floor: a pre-registered minimum above zero, not a bare positivity test",
    "before/after line reads the probe direction; circuit changes appear only in diagnostics",
    "budget units: forward token positions divided by the registered positions_per_unit",
    "wall-clock audit envelope is not modeled; only the metered compute budget is enforced",
    "claim context is recorded descriptively and does not filter datasets",
)


class RegistrationMismatch(ValueError):
    pass


class StoreUnavailable(RuntimeError):
    pass


def code_identity() -> str:
    """Digest over this package's source files, standing in for a code revision."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.suffix in (".py", ".csv", ".json"):
            h.update(path.relative_to(root).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(path.read_bytes()).digest())
    return "sha256:" + h.hexdigest()


@dataclass(frozen=True)
class LineManifest:
    line: str
    seeds: Mapping[str, int]
    checkpoints: Mapping[str, str]  # role -> archive ref in the store
    checkpoint_digests: Mapping[str, str]  # role -> parameter digest
    datasets: Mapping[str, str]
    claim_ref: str
    registration_ref: str
    code_id: str
    candidate_sites: Sequence[Mapping[str, Any]] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "candidate_sites": [dict(s) for s in self.candidate_sites],
            "checkpoint_digests": dict(self.checkpoint_digests),
            "checkpoints": dict(self.checkpoints),
            "claim_ref": self.claim_ref,
            "code_id": self.code_id,
            "datasets": dict(self.datasets),
            "line": self.line,
            "registration_ref": self.registration_ref,
            "seeds": dict(self.seeds),
        }

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "LineManifest":
        return cls(
            line=raw["line"],
            seeds=dict(raw["seeds"]),
            checkpoints=dict(raw["checkpoints"]),
            checkpoint_digests=dict(raw["checkpoint_digests"]),
            datasets=dict(raw["datasets"]),
            claim_ref=raw["claim_ref"],
            registration_ref=raw["registration_ref"],
            code_id=raw["code_id"],
            candidate_sites=[dict(s) for s in raw.get("candidate_sites", [])],
        )

    def artifacts(self) -> dict[str, str]:
        """Named store references this line reads."""
        out = {f"checkpoint:{role}": ref for role, ref in self.checkpoints.items()}
        out |= {f"dataset:{role}": ref for role, ref in self.datasets.items()}
        out["claim"] = self.claim_ref
        out["registration"] = self.registration_ref
        return out


@dataclass(frozen=True)
class EvidencePackage:
    pilot_id: str
    claim: Claim
    registration_digest: str
    results: Mapping[str, EvidenceResult]
    manifests: Mapping[str, LineManifest]

    def to_json(self) -> dict[str, Any]:
        return {
            "claim": serialize_claim(self.claim),
            "manifests": {k: m.to_json() for k, m in sorted(self.manifests.items())},
            "pilot_id": self.pilot_id,
            "registration_digest": self.registration_digest,
            "results": {k: r.to_json() for k, r in sorted(self.results.items())},
        }

    @classmethod
    def from_json(cls, raw: Mapping[str, Any], store: ArtifactStore) -> "EvidencePackage":
        return cls(
            pilot_id=raw["pilot_id"],
            claim=parse_claim(raw["claim"], None),
            registration_digest=raw["registration_digest"],
            results={k: EvidenceResult.from_json(v) for k, v in raw["results"].items()},
            manifests={k: LineManifest.from_json(v) for k, v in raw["manifests"].items()},
        )


@dataclass(frozen=True)
class Deviation:
    id: str
    kind: str  # digest_mismatch | code_mismatch | seed_mismatch | tolerance_exceeded
    subject: str
    expected: str
    observed: str

    def to_json(self) -> dict[str, str]:
        return {"expected": self.expected, "id": self.id, "kind": self.kind,
                "observed": self.observed, "subject": self.subject}


@dataclass(frozen=True)
class LineReproduction:
    line: str
    status: str  # reproduced | mismatch | not_attempted
    original_value: float | None
    reproduced_value: float | None
    match: bool
    deviations: tuple[str, ...] = ()
    compute_spent: int = 0

    def __post_init__(self) -> None:
        if self.match and self.original_value is not None and self.reproduced_value is not None:
            if abs(self.reproduced_value - self.original_value) > VALUE_TOLERANCE:
                raise ValueError("match requires agreement within the reproduction tolerance")
        if self.status != NOT_ATTEMPTED and not self.deviations and not self.match:
            raise ValueError("a mismatch must cite at least one deviation")

    def to_json(self) -> dict[str, Any]:
        return {
            "compute_spent": self.compute_spent,
            "deviations": list(self.deviations),
            "line": self.line,
            "match": self.match,
            "original_value": self.original_value,
            "reproduced_value": self.reproduced_value,
            "status": self.status,
        }


@dataclass(frozen=True)
class ReproductionRecord:
    registration_digest: str
    enclave_hash: str
    enclave_inputs: Mapping[str, Any]
    lines: Mapping[str, LineReproduction]
    deviation_log: tuple[Deviation, ...]
    budget_exhausted: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "budget_exhausted": self.budget_exhausted,
            "deviation_log": [d.to_json() for d in self.deviation_log],
            "enclave_hash": self.enclave_hash,
            "enclave_inputs": dict(self.enclave_inputs),
            "lines": {k: v.to_json() for k, v in self.lines.items()},
            "registration_digest": self.registration_digest,
        }


def enclave_hash(inputs: Mapping[str, Any]) -> str:
    return digest(dict(inputs))


def _observe(store: ArtifactStore, ref: str) -> str:
    try:
        return store.observed_digest(ref)
    except UnresolvableArtifact:
        raise
    except OSError as exc:
        raise StoreUnavailable(str(exc)) from None


def _rerun(line: str, manifest: LineManifest, store: ArtifactStore, registration: PreRegistration) -> EvidenceResult:
    claim = parse_claim(json.loads(store.get_bytes(manifest.claim_ref)), store)
    datasets = claim_datasets(claim, store)
    ckpts = {role: load_stored_checkpoint(store, ref) for role, ref in manifest.checkpoints.items()}
    seeds = manifest.seeds
    if line == "probe":
        return probe_line(ckpts["after"], claim, seeds["split_seed"], registration=registration, datasets=datasets)
    if line == "patching":
        sites = [PatchSpec(Site.from_json(s["site"]), s["mode"]) for s in manifest.candidate_sites]
        return patching_line(ckpts["after"], claim, sites, registration=registration, datasets=datasets)
    return before_after_line(ckpts["base"], ckpts["after"], claim, seeds["split_seed"],
                             registration=registration, datasets=datasets)


def _same(a: float, b: float) -> bool:
    return abs(float(roundtrip(float(a))) - float(roundtrip(float(b)))) <= VALUE_TOLERANCE


def reproduce(pkg: EvidencePackage, store: ArtifactStore, ledger: BudgetLedger | None = None) -> ReproductionRecord:
    """Re-execute each line inside the enclave stub.

    A budget stop does not raise: the record marks the remaining lines not
    attempted and sets ``budget_exhausted`` so a report is still emitted.
    """
    current_code = code_identity()
    deviations: list[Deviation] = []
    observed: dict[str, str] = {}
    bad: set[str] = set()

    def log(kind: str, subject: str, expected: str, got: str) -> str:
        dev = Deviation(f"dev-{len(deviations) + 1:03d}", kind, subject, expected, got)
        deviations.append(dev)
        return dev.id

    dev_of: dict[str, str] = {}
    for line in LINES:
        m = pkg.manifests.get(line)
        if m is None:
            continue
        for name, ref in m.artifacts().items():
            if ref in observed:
                continue
            observed[ref] = _observe(store, ref)
            if observed[ref] != ref:
                dev_of[ref] = log("digest_mismatch", name, ref, observed[ref])
                bad.add(ref)
    code_ids = {m.code_id for m in pkg.manifests.values()}
    code_dev = {cid: log("code_mismatch", "code", cid, current_code) for cid in sorted(code_ids) if cid != current_code}

    registration = None
    inputs: dict[str, Any] = {"code": current_code, "registration_digest": pkg.registration_digest}
    for line in LINES:
        m = pkg.manifests.get(line)
        if m is None:
            continue
        inputs[line] = {name: observed[ref] for name, ref in sorted(m.artifacts().items())}
        if registration is None and m.registration_ref not in bad:
            registration = PreRegistration.from_json(json.loads(store.get_bytes(m.registration_ref)))
            if registration.digest != pkg.registration_digest:
                raise RegistrationMismatch("package registration digest differs from its manifest")
            for key in ("split_seed", "bootstrap_seed"):
                want = getattr(registration.method, key)
                if m.seeds.get(key, want) != want:
                    log("seed_mismatch", f"{line}:{key}", str(want), str(m.seeds.get(key)))

    records: dict[str, LineReproduction] = {}
    exhausted = False
    for line in LINES:
        original = pkg.results.get(line)
        m = pkg.manifests.get(line)
        if original is None or m is None or exhausted:
            records[line] = LineReproduction(line, NOT_ATTEMPTED, original.value if original else None, None, False)
            continue
        blocked = [dev_of[ref] for ref in m.artifacts().values() if ref in bad]
        blocked += [code_dev[m.code_id]] if m.code_id in code_dev else []
        seed_devs = [d.id for d in deviations if d.kind == "seed_mismatch" and d.subject.startswith(line + ":")]
        if blocked or registration is None:
            records[line] = LineReproduction(line, "mismatch", original.value, None, False, tuple(blocked + seed_devs))
            continue
        if ledger is not None:
            try:
                meter(ledger, f"reproduce:{line}", original.compute_spent)
            except BudgetExhausted:
                exhausted = True
                records[line] = LineReproduction(line, NOT_ATTEMPTED, original.value, None, False)
                continue
        rerun = _rerun(line, m, store, registration)
        devs = list(seed_devs)
        if not _same(rerun.value, original.value):
            devs.append(log("tolerance_exceeded", f"{line}:value", repr(original.value), repr(rerun.value)))
        for key in ("winning_site", "baseline_rate"):
            if key in original.diagnostics and original.diagnostics[key] != rerun.diagnostics.get(key):
                devs.append(log("tolerance_exceeded", f"{line}:{key}", str(original.diagnostics[key]),
                                str(rerun.diagnostics.get(key))))
        records[line] = LineReproduction(
            line, "reproduced" if not devs else "mismatch", original.value, rerun.value, not devs,
            tuple(devs), rerun.compute_spent,
        )
    return ReproductionRecord(
        registration_digest=pkg.registration_digest,
        enclave_hash=enclave_hash(inputs),
        enclave_inputs=inputs,
        lines=records,
        deviation_log=tuple(deviations),
        budget_exhausted=exhausted,
    )


def verdict_line(result: EvidenceResult, repro: LineReproduction, repro_registration: str) -> str:
    if result.registration_digest != repro_registration:
        raise RegistrationMismatch(
            f"{result.line} cites {result.registration_digest}, reproduction cites {repro_registration}"
        )
    return "pass" if result.passed and repro.match else "fail"


def verdict_overall(line_verdicts: Sequence[str]) -> str:
    if len(line_verdicts) != 3:
        raise ValueError("exactly three line verdicts are required")
    passes = sum(v == "pass" for v in line_verdicts)
    if passes == 3:
        return "reproduced"
    return "partially_reproduced" if passes else "not_reproduced"


@dataclass(frozen=True)
class VerifierReport:
    body: Mapping[str, Any]
    report_digest: str
    store_ref: str = ""

    @property
    def overall_verdict(self) -> str:
        return self.body["overall_verdict"]

    @property
    def status(self) -> str:
        return self.body["status"]

    def to_bytes(self) -> bytes:
        return document_bytes(self.body)


def _line_verdicts(pkg: EvidencePackage, repro: ReproductionRecord) -> dict[str, str]:
    out = {}
    for line in LINES:
        result = pkg.results.get(line)
        rl = repro.lines.get(line)
        if result is None or rl is None or rl.status == NOT_ATTEMPTED:
            out[line] = NOT_ATTEMPTED
        else:
            out[line] = verdict_line(result, rl, repro.registration_digest)
    return out


def build_report(
    pkg: EvidencePackage,
    repro: ReproductionRecord,
    ledger: BudgetLedger,
    registration: PreRegistration,
    *,
    status: str = "completed",
    notes: Sequence[str] = (),
) -> dict[str, Any]:
    if registration.digest != pkg.registration_digest:
        raise RegistrationMismatch("report registration differs from the package's")
    verdicts = _line_verdicts(pkg, repro)
    overall = verdict_overall([v if v != NOT_ATTEMPTED else "fail" for v in verdicts.values()])
    probe, patching = pkg.results.get("probe"), pkg.results.get("patching")
    return roundtrip({
        "budget": ledger.to_json() | {"positions_per_unit": registration.method.positions_per_unit},
        "certificate": {
            "ablation_effect_size": patching.value if patching else None,
            "enclave_hash": repro.enclave_hash,
            "probe_auroc": probe.value if probe else None,
        },
        "claim": serialize_claim(pkg.claim),
        "evidence": {k: r.to_json() for k, r in sorted(pkg.results.items())},
        "floors": {"registration_digest": registration.digest, **registration.body()},
        "line_verdicts": verdicts,
        "manifests": {k: m.to_json() for k, m in sorted(pkg.manifests.items())},
        "method_notes": list(METHOD_NOTES) + list(notes),
        "overall_verdict": overall,
        "pilot_id": pkg.pilot_id,
        "reproduction": repro.to_json(),
        "status": status,
    })


def emit_report(
    pkg: EvidencePackage,
    repro: ReproductionRecord,
    ledger: BudgetLedger,
    registration: PreRegistration,
    store: ArtifactStore,
    *,
    status: str = "completed",
    notes: Sequence[str] = (),
) -> VerifierReport:
    """Assemble, hash and persist the report; the verdict never blocks emission."""
    body = build_report(pkg, repro, ledger, registration, status=status, notes=notes)
    data = document_bytes(body)
    try:
        ref = store.put_bytes(data)
        store.set_name(f"report-{pkg.pilot_id}", {"ref": ref, "overall_verdict": body["overall_verdict"],
                                                  "status": status})
    except OSError as exc:
        raise StoreUnavailable(str(exc)) from None
    return VerifierReport(body, ref, ref)


def load_report(store: ArtifactStore, pilot_id: str) -> VerifierReport:
    pointer = store.get_name(f"report-{pilot_id}")
    if pointer is None:
        raise UnresolvableArtifact(f"no report recorded for pilot {pilot_id!r}")
    data = store.get_bytes(pointer["ref"])
    return VerifierReport(json.loads(data), pointer["ref"], pointer["ref"])


def check_certificate(report: Mapping[str, Any]) -> list[str]:
    """Internal-consistency problems in a report body (empty when consistent)."""
    problems = []
    cert = report["certificate"]
    ev = report["evidence"]
    if cert["probe_auroc"] != (ev["probe"]["value"] if "probe" in ev else None):
        problems.append("certificate probe_auroc differs from the probe line")
    if cert["ablation_effect_size"] != (ev["patching"]["value"] if "patching" in ev else None):
        problems.append("certificate ablation_effect_size differs from the patching line")
    repro = report["reproduction"]
    if cert["enclave_hash"] != repro["enclave_hash"] or enclave_hash(repro["enclave_inputs"]) != cert["enclave_hash"]:
        problems.append("certificate enclave_hash is not recomputable from the enclave inputs")
    verdicts = [v if v != NOT_ATTEMPTED else "fail" for v in report["line_verdicts"].values()]
    if verdict_overall(verdicts) != report["overall_verdict"]:
        problems.append("overall verdict does not follow from the line verdicts")
    return problems


__all__ = [
    "Deviation",
    "EvidencePackage",
    "LineManifest",
    "LineReproduction",
    "RegistrationMismatch",
    "ReproductionRecord",
    "StoreError",
    "StoreUnavailable",
    "VerifierReport",
    "build_report",
    "check_certificate",
    "code_identity",
    "emit_report",
    "load_report",
    "reproduce",
    "verdict_line",
    "verdict_overall",
]
