"""Audit-gap coding: access levels, cell colors, the instrument inventory and recodings.

For a claim category with implied access A and verifier access V the gap is
the interval [V, A]. A cell is Green when V >= A, Amber when V < A but a
structured-access protocol could close the gap, and Red otherwise.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from mechpilot.canonical import digest

CATEGORIES = ("decomposable", "latent_absence")
CSV_COLUMNS = (
    "instrument",
    "jurisdiction",
    "comparator",
    "claim_category",
    "accepted_access",
    "implied_access",
    "verifier_access",
    "closable",
    "cell",
    "source_key",
    "coding_basis",
)
NO_CODING = "---"
# Sub-national jurisdictions count toward their parent in jurisdiction totals.
JURISDICTION_PARENT = {"US-CA": "US"}


class MatrixError(ValueError):
    pass


class UnknownRow(MatrixError):
    pass


class UnknownCategory(MatrixError):
    pass


class CellMismatch(MatrixError):
    pass


class AccessLevel(IntEnum):
    B = 0
    OtB = 1
    G = 2
    W = 3
    S = 4

    @classmethod
    def parse(cls, text: str) -> "AccessLevel":
        try:
            return cls[text.strip()]
        except KeyError:
            raise MatrixError(f"unknown access level {text!r}; expected one of {[m.name for m in cls]}") from None


def parse_access_set(text: str) -> frozenset[AccessLevel]:
    """``"B+OtB"`` -> {B, OtB}; the empty string is the empty set."""
    return frozenset(AccessLevel.parse(p) for p in text.split("+") if p.strip())


def render_access_set(levels: Iterable[AccessLevel]) -> str:
    return "+".join(level.name for level in sorted(levels))


class Color(Enum):
    GREEN = "G"
    AMBER = "A"
    RED = "R"


# Display order for multi-color rows, e.g. "G/A".
_DISPLAY_ORDER = (Color.GREEN, Color.AMBER, Color.RED)


@dataclass(frozen=True)
class ClaimCategoryCoding:
    category: str
    implied_access: AccessLevel
    verifier_access: AccessLevel = AccessLevel.B
    closable: bool = True
    basis: str = "reconstructed"

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise UnknownCategory(f"claim category {self.category!r} not in {CATEGORIES}")
        object.__setattr__(self, "implied_access", AccessLevel(self.implied_access))
        object.__setattr__(self, "verifier_access", AccessLevel(self.verifier_access))

    @property
    def has_gap(self) -> bool:
        return self.verifier_access < self.implied_access


@dataclass(frozen=True)
class InstrumentRow:
    instrument: str
    jurisdiction: str
    accepted_access: frozenset[AccessLevel]
    codings: tuple[ClaimCategoryCoding, ...]
    comparator: bool = False
    source_key: str = ""

    def __post_init__(self) -> None:
        if not self.codings and not self.comparator:
            raise MatrixError(f"{self.instrument}: non-comparator rows need at least one coding")
        cats = [c.category for c in self.codings]
        if len(set(cats)) != len(cats):
            raise MatrixError(f"{self.instrument}: duplicate claim category")

    def coding(self, category: str) -> ClaimCategoryCoding:
        for c in self.codings:
            if c.category == category:
                return c
        raise UnknownCategory(f"{self.instrument} has no {category!r} coding")

    def to_json(self) -> dict[str, Any]:
        return {
            "accepted_access": render_access_set(self.accepted_access),
            "codings": [
                {
                    "basis": c.basis,
                    "category": c.category,
                    "closable": c.closable,
                    "implied_access": c.implied_access.name,
                    "verifier_access": c.verifier_access.name,
                }
                for c in self.codings
            ],
            "comparator": self.comparator,
            "instrument": self.instrument,
            "jurisdiction": self.jurisdiction,
            "source_key": self.source_key,
        }


def cell_color(c: ClaimCategoryCoding) -> Color:
    if c.verifier_access >= c.implied_access:
        return Color.GREEN
    return Color.AMBER if c.closable else Color.RED


def row_display(row: InstrumentRow) -> str:
    if not row.codings:
        return NO_CODING
    colors = {cell_color(c) for c in row.codings}
    return "/".join(col.value for col in _DISPLAY_ORDER if col in colors)


@dataclass(frozen=True)
class Finding:
    holds: bool
    gap_row_count: int


def aggregate_finding(rows: Sequence[InstrumentRow]) -> Finding:
    if not rows:
        raise MatrixError("aggregate_finding needs at least one row")
    gap = [any(c.has_gap for c in r.codings) for r in rows]
    holds = all(g for g, r in zip(gap, rows) if not r.comparator)
    return Finding(holds, sum(gap))


@dataclass(frozen=True)
class Recoding:
    instrument: str
    coding: ClaimCategoryCoding

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "Recoding":
        try:
            return cls(
                str(raw["instrument"]),
                ClaimCategoryCoding(
                    category=str(raw["category"]),
                    implied_access=AccessLevel.parse(raw["implied_access"]),
                    verifier_access=AccessLevel.parse(raw.get("verifier_access", "B")),
                    closable=bool(raw.get("closable", True)),
                    basis="recoded",
                ),
            )
        except KeyError as exc:
            raise MatrixError(f"recoding lacks field {exc}") from None


@dataclass(frozen=True)
class CellDelta:
    instrument: str
    category: str
    before: Color
    after: Color

    def to_json(self) -> dict[str, str]:
        return {"after": self.after.value, "before": self.before.value,
                "category": self.category, "instrument": self.instrument}


@dataclass(frozen=True)
class SensitivityReport:
    finding_before: Finding
    finding_after: bool
    gap_row_count_after: int
    deltas: tuple[CellDelta, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "deltas": [d.to_json() for d in self.deltas],
            "finding_after": self.finding_after,
            "finding_before": self.finding_before.holds,
            "gap_row_count_after": self.gap_row_count_after,
            "gap_row_count_before": self.finding_before.gap_row_count,
        }


def sensitivity(rows: Sequence[InstrumentRow], recodings: Sequence[Recoding]) -> SensitivityReport:
    """Apply ``recodings`` to a copy of ``rows`` and recompute the finding."""
    index = {r.instrument: i for i, r in enumerate(rows)}
    updated = list(rows)
    deltas = []
    for rc in recodings:
        if rc.instrument not in index:
            raise UnknownRow(f"no inventory row named {rc.instrument!r}")
        i = index[rc.instrument]
        row = updated[i]
        old = row.coding(rc.coding.category)
        codings = tuple(rc.coding if c.category == rc.coding.category else c for c in row.codings)
        updated[i] = replace(row, codings=codings)
        deltas.append(CellDelta(rc.instrument, rc.coding.category, cell_color(old), cell_color(rc.coding)))
    after = aggregate_finding(updated)
    return SensitivityReport(aggregate_finding(rows), after.holds, after.gap_row_count, tuple(deltas))


def rows_digest(rows: Sequence[InstrumentRow]) -> str:
    return digest([r.to_json() for r in rows])


@dataclass(frozen=True)
class InventorySummary:
    total_rows: int
    comparators: int
    instruments: int
    jurisdictions: int


def summarize(rows: Sequence[InstrumentRow]) -> InventorySummary:
    instruments = [r for r in rows if not r.comparator]
    juris = {JURISDICTION_PARENT.get(r.jurisdiction, r.jurisdiction) for r in instruments}
    return InventorySummary(len(rows), len(rows) - len(instruments), len(instruments), len(juris))


def _bool(text: str, where: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise MatrixError(f"{where}: expected a boolean, got {text!r}")


def parse_csv(text: str) -> list[InstrumentRow]:
    """Rows in first-seen order; each CSV line is one claim-category coding.

    The ``cell`` column is recomputed and must agree with the stored value.
    """
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in CSV_COLUMNS[:-1] if c not in (reader.fieldnames or ())]
    if missing:
        raise MatrixError(f"inventory CSV lacks columns {missing}")
    order: list[str] = []
    heads: dict[str, dict[str, Any]] = {}
    codings: dict[str, list[ClaimCategoryCoding]] = {}
    for lineno, rec in enumerate(reader, 2):
        name = rec["instrument"]
        where = f"line {lineno} ({name})"
        head = {
            "jurisdiction": rec["jurisdiction"],
            "comparator": _bool(rec["comparator"], where),
            "accepted_access": parse_access_set(rec["accepted_access"]),
            "source_key": rec["source_key"],
        }
        if name not in heads:
            order.append(name)
            heads[name] = head
            codings[name] = []
        elif heads[name] != head:
            raise MatrixError(f"{where}: row-level fields differ from the first line for this instrument")
        if not rec["claim_category"]:
            if rec["cell"] != NO_CODING:
                raise CellMismatch(f"{where}: uncoded line must show {NO_CODING!r}")
            continue
        c = ClaimCategoryCoding(
            category=rec["claim_category"],
            implied_access=AccessLevel.parse(rec["implied_access"]),
            verifier_access=AccessLevel.parse(rec["verifier_access"] or "B"),
            closable=_bool(rec["closable"], where),
            basis=rec.get("coding_basis") or "reconstructed",
        )
        if cell_color(c).value != rec["cell"]:
            raise CellMismatch(f"{where}: stored cell {rec['cell']!r}, recomputed {cell_color(c).value!r}")
        codings[name].append(c)
    return [InstrumentRow(instrument=n, codings=tuple(codings[n]), **heads[n]) for n in order]


def dump_csv(rows: Sequence[InstrumentRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        head = [r.instrument, r.jurisdiction, str(r.comparator).lower()]
        tail_acc = render_access_set(r.accepted_access)
        if not r.codings:
            w.writerow(head + ["", tail_acc, "", "", "", NO_CODING, r.source_key, "reconstructed"])
        for c in r.codings:
            w.writerow(head + [c.category, tail_acc, c.implied_access.name, c.verifier_access.name,
                               str(c.closable).lower(), cell_color(c).value, r.source_key, c.basis])
    return out.getvalue()


def load_csv(path: str | Path) -> list[InstrumentRow]:
    return parse_csv(Path(path).read_text(encoding="utf-8"))


def load_recodings(path: str | Path) -> list[Recoding]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise MatrixError("recodings file must hold a JSON list")
    return [Recoding.from_json(r) for r in raw]


def shipped_inventory_path() -> Path:
    return Path(str(resources.files("mechpilot.matrix") / "data" / "inventory.csv"))


def shipped_recodings_path() -> Path:
    return Path(str(resources.files("mechpilot.matrix") / "data" / "contested_recodings.json"))


def shipped_inventory() -> list[InstrumentRow]:
    return load_csv(shipped_inventory_path())
