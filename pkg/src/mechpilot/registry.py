"""Pre-registered floors, method parameters and a fail-closed compute budget.

Registrations and evidence-run notices share one hash-chained log so the
ordering "registered before any evidence" can be replayed and checked.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

from mechpilot.canonical import digest, roundtrip
from mechpilot.store import HashChainLog

REGISTRY_LOG = "registry.jsonl"
# One H100-day equivalent, in abstract budget units.
H100_DAY_UNITS = 86_400


class RegistryError(ValueError):
    pass


class InvalidFloors(RegistryError):
    pass


class RegistrationClosed(RegistryError):
    """Evidence has already run under this pilot id."""


class UnknownRegistration(RegistryError):
    pass


class BudgetExhausted(RuntimeError):
    def __init__(self, line: str, units: int, spent: int, limit: int):
        super().__init__(f"{line}: {units} units would exceed budget ({spent} of {limit} spent)")
        self.line, self.units, self.spent, self.limit = line, units, spent, limit


@dataclass(frozen=True)
class FloorSet:
    auroc_floor: float = 0.95
    effect_size_floor: float = 1.5
    delta_floor: float = 0.05
    probe_layer: int = 0
    min_heldout_size: int = 100

    def __post_init__(self) -> None:
        if not 0.5 <= self.auroc_floor <= 1.0:
            raise InvalidFloors("auroc_floor must lie in [0.5, 1]")
        if not (math.isfinite(self.effect_size_floor) and self.effect_size_floor >= 0):
            raise InvalidFloors("effect_size_floor must be a finite non-negative sigma count")
        if not 0.0 <= self.delta_floor < 1.0:
            raise InvalidFloors("delta_floor must lie in [0, 1)")
        if self.probe_layer < 0:
            raise InvalidFloors("probe_layer must be non-negative")
        if self.min_heldout_size <= 0:
            raise InvalidFloors("min_heldout_size must be positive")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "FloorSet":
        try:
            return cls(
                auroc_floor=float(raw.get("auroc_floor", 0.95)),
                effect_size_floor=float(raw.get("effect_size_floor", 1.5)),
                delta_floor=float(raw.get("delta_floor", 0.05)),
                probe_layer=int(raw.get("probe_layer", 0)),
                min_heldout_size=int(raw.get("min_heldout_size", 100)),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidFloors(str(exc)) from None


@dataclass(frozen=True)
class MethodParams:
    """Estimator settings fixed alongside the floors."""

    bootstrap_resamples: int = 1000
    bootstrap_seed: int = 0
    split_seed: int = 0
    probe_l2: float = 1.0
    positions_per_unit: int = 1000

    def __post_init__(self) -> None:
        if self.bootstrap_resamples < 2:
            raise InvalidFloors("need at least 2 bootstrap resamples")
        if self.probe_l2 <= 0:
            raise InvalidFloors("probe_l2 must be positive")
        if self.positions_per_unit <= 0:
            raise InvalidFloors("positions_per_unit must be positive")

    def units(self, positions: int) -> int:
        """Budget units charged for ``positions`` forward token positions."""
        return -(-positions // self.positions_per_unit)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "MethodParams":
        defaults = cls()
        return cls(
            bootstrap_resamples=int(raw.get("bootstrap_resamples", defaults.bootstrap_resamples)),
            bootstrap_seed=int(raw.get("bootstrap_seed", defaults.bootstrap_seed)),
            split_seed=int(raw.get("split_seed", defaults.split_seed)),
            probe_l2=float(raw.get("probe_l2", defaults.probe_l2)),
            positions_per_unit=int(raw.get("positions_per_unit", defaults.positions_per_unit)),
        )


@dataclass(frozen=True)
class PreRegistration:
    floors: FloorSet
    budget_limit: int
    issuer: str
    pilot_id: str
    issued_at: int
    method: MethodParams = field(default_factory=MethodParams)
    digest: str = ""

    def __post_init__(self) -> None:
        if self.budget_limit <= 0:
            raise InvalidFloors("budget_limit must be positive")
        expected = digest(self.body())
        if self.digest and self.digest != expected:
            raise RegistryError("registration digest does not match its content")
        object.__setattr__(self, "digest", expected)

    def body(self) -> dict[str, Any]:
        return {
            "budget_limit": self.budget_limit,
            "floors": self.floors.to_json(),
            "issued_at": self.issued_at,
            "issuer": self.issuer,
            "method": self.method.to_json(),
            "pilot_id": self.pilot_id,
        }

    def to_json(self) -> dict[str, Any]:
        return self.body() | {"digest": self.digest}

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "PreRegistration":
        return cls(
            floors=FloorSet.from_json(raw["floors"]),
            budget_limit=int(raw["budget_limit"]),
            issuer=str(raw["issuer"]),
            pilot_id=str(raw["pilot_id"]),
            issued_at=int(raw["issued_at"]),
            method=MethodParams.from_json(raw.get("method", {})),
            digest=str(raw.get("digest", "")),
        )


def registry_log(store_root: str | Path) -> HashChainLog:
    return HashChainLog(Path(store_root) / REGISTRY_LOG)


def register(
    floors: FloorSet,
    budget_limit: int,
    issuer: str,
    *,
    log: HashChainLog,
    pilot_id: str = "pilot",
    method: MethodParams = MethodParams(),
) -> PreRegistration:
    """Append a registration to ``log``; identical content returns the existing entry."""
    log.verify()
    entries = log.entries()
    for e in entries:
        if e.record.get("kind") == "evidence_run" and e.record.get("pilot_id") == pilot_id:
            raise RegistrationClosed(f"evidence already ran under pilot {pilot_id!r} (log entry {e.seq})")
    candidate = roundtrip({"floors": floors.to_json(), "budget_limit": budget_limit, "issuer": issuer,
                           "pilot_id": pilot_id, "method": method.to_json()})
    for e in entries:
        if e.record.get("kind") == "registration":
            reg = e.record["registration"]
            if {k: reg[k] for k in candidate} == candidate:
                return PreRegistration.from_json(reg)
    reg = PreRegistration(floors, budget_limit, issuer, pilot_id, issued_at=len(entries), method=method)
    log.append({"kind": "registration", "registration": reg.to_json()})
    return reg


def find_registration(log: HashChainLog, reg_digest: str) -> tuple[PreRegistration, int]:
    """The registration with ``reg_digest`` and its log sequence number."""
    for e in log.entries():
        if e.record.get("kind") == "registration" and e.record["registration"]["digest"] == reg_digest:
            return PreRegistration.from_json(e.record["registration"]), e.seq
    raise UnknownRegistration(f"{reg_digest} is not in the registry log {log.path}")


def note_evidence_run(log: HashChainLog, registration: PreRegistration) -> int:
    """Record that evidence is starting; closes the pilot id to new registrations."""
    find_registration(log, registration.digest)
    return log.append(
        {"kind": "evidence_run", "pilot_id": registration.pilot_id, "registration": registration.digest}
    ).seq


@dataclass(frozen=True)
class ContractDecision:
    accepted: bool
    reason: str = ""


_STRICTNESS = ("auroc_floor", "effect_size_floor", "delta_floor")


def validate_contract(contract_floors: FloorSet, registration: PreRegistration) -> ContractDecision:
    floors = registration.floors
    lower = [
        f"{name} {getattr(contract_floors, name)} lower than floor {getattr(floors, name)}"
        for name in _STRICTNESS
        if getattr(contract_floors, name) < getattr(floors, name)
    ]
    if contract_floors.min_heldout_size < floors.min_heldout_size:
        lower.append("min_heldout_size lower than floor")
    if lower:
        return ContractDecision(False, "lower than floor: " + "; ".join(lower))
    return ContractDecision(True)


@dataclass(frozen=True)
class LedgerEntry:
    line: str
    units: int
    timestamp: int


class BudgetLedger:
    """Append-only spend record; optionally mirrored to a hash-chained file."""

    def __init__(self, registration_digest: str, limit: int, log: HashChainLog | None = None):
        if limit <= 0:
            raise ValueError("budget limit must be positive")
        self.registration_digest = registration_digest
        self.limit = limit
        self.log = log
        self._entries: list[LedgerEntry] = []

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    @property
    def spent(self) -> int:
        return sum(e.units for e in self._entries)

    @property
    def remaining(self) -> int:
        return self.limit - self.spent

    def _append(self, entry: LedgerEntry) -> None:
        self._entries.append(entry)
        if self.log is not None:
            self.log.append({"line": entry.line, "units": entry.units, "timestamp": entry.timestamp,
                             "registration": self.registration_digest})

    def to_json(self) -> dict[str, Any]:
        return {
            "entries": [asdict(e) for e in self._entries],
            "limit": self.limit,
            "registration": self.registration_digest,
            "spent": self.spent,
        }

    @classmethod
    def replay(cls, log: HashChainLog) -> "BudgetLedger":
        """Rebuild a ledger from its file; the limit comes from the first entry's registration."""
        log.verify()
        entries = log.entries()
        if not entries:
            raise RegistryError(f"{log.path} is empty")
        head = entries[0].record
        ledger = cls(head["registration"], int(head["limit"]))
        for e in entries[1:]:
            ledger._entries.append(LedgerEntry(e.record["line"], int(e.record["units"]), int(e.record["timestamp"])))
        return ledger


def open_ledger(registration: PreRegistration, path: str | Path | None = None) -> BudgetLedger:
    """A fresh ledger; an existing file at ``path`` is replaced."""
    log = None
    if path is not None:
        path = Path(path)
        if path.exists():
            path.unlink()
        log = HashChainLog(path)
        log.append({"kind": "open", "registration": registration.digest, "limit": registration.budget_limit})
    return BudgetLedger(registration.digest, registration.budget_limit, log)


def meter(ledger: BudgetLedger, line: str, units: int, timestamp: int | None = None) -> None:
    if not isinstance(units, int) or units <= 0:
        raise ValueError("metered units must be a positive integer")
    if ledger.spent + units > ledger.limit:
        raise BudgetExhausted(line, units, ledger.spent, ledger.limit)
    ts = len(ledger.entries) if timestamp is None else timestamp
    ledger._append(LedgerEntry(line, units, ts))
