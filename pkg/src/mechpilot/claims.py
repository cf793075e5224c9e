"""Claim forms of the shape "the model reliably PHI in context C".

A claim is only in scope when it carries a decidable predicate over model
outputs. Predicates come from a closed grammar so a verifier can re-evaluate
them bit-exactly:

``prefix``
    the completion starts with the given token sequence;
``regex``
    ``re.search`` on the detokenized completion (tokens joined by one space);
``set``
    the detokenized completion is one of the given strings.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from mechpilot.canonical import canonical_text
from mechpilot.store import ArtifactStore, UnresolvableArtifact

PREDICATE_KINDS = ("prefix", "regex", "set")
DATASET_ROLES = ("eval", "trigger", "benign")


class ClaimError(ValueError):
    pass


class MissingPredicate(ClaimError):
    """The document has no evaluable rule; it is a free-standing assertion."""


class UnresolvableDataset(ClaimError):
    pass


class OverlappingDatasets(ClaimError):
    pass


class MalformedRecord(ClaimError):
    pass


class DatasetFormatError(ClaimError):
    pass


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    tokens: tuple[str, ...]
    tags: frozenset[str] = frozenset()

    def to_json(self) -> dict[str, Any]:
        return {"id": self.prompt_id, "tags": sorted(self.tags), "tokens": list(self.tokens)}


@dataclass(frozen=True)
class Dataset:
    ref: str
    records: tuple[PromptRecord, ...]

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(r.prompt_id for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def with_tag(self, tag: str) -> tuple[PromptRecord, ...]:
        return tuple(r for r in self.records if tag in r.tags)


def dataset_bytes(records: Iterable[PromptRecord]) -> bytes:
    """One canonical JSON object per line, in the given order."""
    return "".join(canonical_text(r.to_json()) + "\n" for r in records).encode("utf-8")


def parse_dataset(data: bytes, ref: str = "") -> Dataset:
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            rec = PromptRecord(str(raw["id"]), tuple(raw["tokens"]), frozenset(raw.get("tags", ())))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{ref or 'dataset'} line {lineno}: {exc}") from None
        if rec.prompt_id in seen:
            raise DatasetFormatError(f"{ref or 'dataset'}: duplicate prompt id {rec.prompt_id!r}")
        if not rec.tokens or not all(isinstance(t, str) for t in rec.tokens):
            raise DatasetFormatError(f"{ref or 'dataset'} line {lineno}: bad token list")
        seen.add(rec.prompt_id)
        records.append(rec)
    return Dataset(ref, tuple(records))


def load_dataset(store: ArtifactStore, ref: str) -> Dataset:
    try:
        data = store.get_bytes(ref)
    except UnresolvableArtifact as exc:
        raise UnresolvableDataset(str(exc)) from None
    return parse_dataset(data, ref)


@dataclass(frozen=True)
class OutputRecord:
    prompt_id: str
    prompt_text: tuple[str, ...]
    completion: tuple[str, ...]
    markers: frozenset[str] = frozenset()

    def to_json(self) -> dict[str, Any]:
        return {
            "completion": list(self.completion),
            "markers": sorted(self.markers),
            "prompt_id": self.prompt_id,
            "prompt_text": list(self.prompt_text),
        }


@dataclass(frozen=True)
class PredicateRule:
    kind: str
    pattern: tuple[str, ...] | str

    def to_json(self) -> dict[str, Any]:
        pattern = self.pattern if isinstance(self.pattern, str) else list(self.pattern)
        return {"kind": self.kind, "pattern": pattern}


@dataclass(frozen=True)
class Claim:
    id: str
    phi_description: str
    context_description: str
    predicate_rule: PredicateRule
    eval_dataset_ref: str
    trigger_dataset_ref: str
    benign_dataset_ref: str
    _regex: re.Pattern | None = field(default=None, compare=False, repr=False)

    @property
    def dataset_refs(self) -> dict[str, str]:
        return {
            "eval": self.eval_dataset_ref,
            "trigger": self.trigger_dataset_ref,
            "benign": self.benign_dataset_ref,
        }


def _parse_predicate(raw: Any) -> PredicateRule:
    if not isinstance(raw, Mapping) or not raw:
        raise MissingPredicate("claim has no predicate rule; free-standing assertions are out of scope")
    kind = raw.get("kind")
    pattern = raw.get("pattern")
    if kind not in PREDICATE_KINDS:
        raise MissingPredicate(f"predicate kind {kind!r} is not one of {PREDICATE_KINDS}")
    if kind == "regex":
        if not isinstance(pattern, str) or not pattern:
            raise MissingPredicate("regex predicate needs a non-empty pattern string")
        try:
            re.compile(pattern)
        except re.error as exc:
            raise MissingPredicate(f"regex predicate does not compile: {exc}") from None
        return PredicateRule(kind, pattern)
    if isinstance(pattern, str):
        pattern = pattern.split() if kind == "prefix" else [pattern]
    if not isinstance(pattern, (list, tuple)) or not pattern or not all(isinstance(p, str) for p in pattern):
        raise MissingPredicate(f"{kind} predicate needs a non-empty list of strings")
    if kind == "set":
        pattern = sorted(set(pattern))
    return PredicateRule(kind, tuple(pattern))


def parse_claim(spec_document: Mapping[str, Any] | str, store: ArtifactStore | None) -> Claim:
    """Validate a claim-spec document and resolve its datasets in ``store``.

    With ``store=None`` only the document itself is checked; dataset
    resolution and disjointness are left to whoever later opens the store.
    """
    doc = json.loads(spec_document) if isinstance(spec_document, str) else spec_document
    if not isinstance(doc, Mapping):
        raise ClaimError("claim spec must be a JSON object")
    predicate = _parse_predicate(doc.get("predicate"))
    for key in ("id", "phi", "context"):
        if not isinstance(doc.get(key), str) or not doc[key]:
            raise ClaimError(f"claim spec field {key!r} must be a non-empty string")
    refs = doc.get("datasets")
    if not isinstance(refs, Mapping) or any(not isinstance(refs.get(r), str) for r in DATASET_ROLES):
        raise UnresolvableDataset(f"claim spec must name datasets {DATASET_ROLES}")

    if store is not None:
        _check_datasets(store, refs)
    regex = re.compile(predicate.pattern) if predicate.kind == "regex" else None
    return Claim(
        id=doc["id"],
        phi_description=doc["phi"],
        context_description=doc["context"],
        predicate_rule=predicate,
        eval_dataset_ref=refs["eval"],
        trigger_dataset_ref=refs["trigger"],
        benign_dataset_ref=refs["benign"],
        _regex=regex,
    )


def _check_datasets(store: ArtifactStore, refs: Mapping[str, str]) -> None:
    datasets = {role: load_dataset(store, refs[role]) for role in DATASET_ROLES}
    for role in ("trigger", "benign"):
        if not datasets[role].records:
            raise ClaimError(f"{role} dataset is empty")
    roles = list(DATASET_ROLES)
    for i, a in enumerate(roles):
        for b in roles[i + 1 :]:
            shared = datasets[a].ids & datasets[b].ids
            if shared:
                raise OverlappingDatasets(
                    f"{a} and {b} datasets share prompt ids: {', '.join(sorted(shared)[:5])}"
                )


def serialize_claim(claim: Claim) -> dict[str, Any]:
    return {
        "id": claim.id,
        "phi": claim.phi_description,
        "context": claim.context_description,
        "predicate": claim.predicate_rule.to_json(),
        "datasets": claim.dataset_refs,
    }


def claim_datasets(claim: Claim, store: ArtifactStore) -> dict[str, Dataset]:
    return {role: load_dataset(store, ref) for role, ref in claim.dataset_refs.items()}


def evaluate_predicate(claim: Claim, record: OutputRecord) -> bool:
    completion = record.completion
    if not completion or not all(isinstance(t, str) for t in completion):
        raise MalformedRecord(f"record {record.prompt_id!r} has an empty or non-token completion")
    rule = claim.predicate_rule
    if rule.kind == "prefix":
        return tuple(completion[: len(rule.pattern)]) == tuple(rule.pattern)
    text = " ".join(completion)
    if rule.kind == "regex":
        regex = claim._regex or re.compile(rule.pattern)
        return regex.search(text) is not None
    return text in rule.pattern
