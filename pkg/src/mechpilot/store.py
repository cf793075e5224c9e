"""Content-addressed artifact store and hash-chained append-only logs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from mechpilot.canonical import bytes_digest, canonical_text, digest

STORE_ENV = "MECHPILOT_STORE"
GENESIS = "sha256:" + "0" * 64


class StoreError(RuntimeError):
    pass


class UnresolvableArtifact(StoreError):
    """A reference names an object the store does not hold."""


class ChainBroken(StoreError):
    """A hash-chained log fails replay verification."""


def default_store_root() -> Path:
    return Path(os.environ.get(STORE_ENV, ".mechpilot-store"))


def _hex(ref: str) -> str:
    if not ref.startswith("sha256:") or len(ref) != 71:
        raise UnresolvableArtifact(f"not a sha256 reference: {ref!r}")
    return ref[7:]


class ArtifactStore:
    """Objects live at ``<root>/objects/<hex>``, named by the SHA-256 of their bytes.

    Reads never re-verify implicitly; callers that need sealed-evidence
    semantics call :meth:`observed_digest` and compare.
    """

    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)

    @property
    def objects(self) -> Path:
        return self.root / "objects"

    def put_bytes(self, data: bytes) -> str:
        ref = bytes_digest(data)
        path = self.objects / _hex(ref)
        if not path.exists():
            self.objects.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        return ref

    def put_file(self, path: str | os.PathLike[str]) -> str:
        return self.put_bytes(Path(path).read_bytes())

    def path(self, ref: str) -> Path:
        return self.objects / _hex(ref)

    def has(self, ref: str) -> bool:
        try:
            return self.path(ref).is_file()
        except UnresolvableArtifact:
            return False

    def get_bytes(self, ref: str) -> bytes:
        path = self.path(ref)
        if not path.is_file():
            raise UnresolvableArtifact(f"{ref} not in store {self.root}")
        return path.read_bytes()

    def observed_digest(self, ref: str) -> str:
        """Digest of the bytes currently stored under ``ref``."""
        return bytes_digest(self.get_bytes(ref))

    # named pointers, e.g. a cache of built checkpoints
    def set_name(self, name: str, value: dict[str, Any]) -> None:
        path = self.root / "names" / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_text(value) + "\n")

    def get_name(self, name: str) -> dict[str, Any] | None:
        path = self.root / "names" / f"{name}.json"
        if not path.is_file():
            return None
        return json.loads(path.read_text())


@dataclass(frozen=True)
class ChainEntry:
    seq: int
    prev: str
    record: dict[str, Any]
    digest: str

    def to_json(self) -> dict[str, Any]:
        return {"seq": self.seq, "prev": self.prev, "record": self.record, "digest": self.digest}


def _entry_digest(seq: int, prev: str, record: dict[str, Any]) -> str:
    return digest({"seq": seq, "prev": prev, "record": record})


class HashChainLog:
    """Append-only JSONL log; each line carries the digest of its predecessor."""

    def __init__(self, path: str | os.PathLike[str]):
        self.path = Path(path)

    def entries(self) -> list[ChainEntry]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                raw = json.loads(line)
                out.append(ChainEntry(raw["seq"], raw["prev"], raw["record"], raw["digest"]))
        return out

    def __iter__(self) -> Iterator[ChainEntry]:
        return iter(self.entries())

    def head(self) -> str:
        entries = self.entries()
        return entries[-1].digest if entries else GENESIS

    def append(self, record: dict[str, Any]) -> ChainEntry:
        entries = self.entries()
        seq = len(entries)
        prev = entries[-1].digest if entries else GENESIS
        # normalize through the canonical rendering so replay sees identical values
        record = json.loads(canonical_text(record))
        entry = ChainEntry(seq, prev, record, _entry_digest(seq, prev, record))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(canonical_text(entry.to_json()) + "\n")
        return entry

    def verify(self) -> None:
        prev = GENESIS
        for i, entry in enumerate(self.entries()):
            if entry.seq != i or entry.prev != prev:
                raise ChainBroken(f"{self.path}: entry {i} does not link to its predecessor")
            if _entry_digest(entry.seq, entry.prev, entry.record) != entry.digest:
                raise ChainBroken(f"{self.path}: entry {i} digest mismatch")
            prev = entry.digest
