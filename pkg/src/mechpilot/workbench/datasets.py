"""Verifier-controlled prompt sets for the refusal claim.

``trigger`` and ``benign`` each hold ``n_per_marker`` eval-marked and
``n_per_marker`` deployment-marked prompts with distinct bodies. ``eval``
holds paired bodies: each body appears once under each marker, tagged
``phi`` or ``benign`` by ground truth.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from mechpilot.claims import PromptRecord, dataset_bytes
from mechpilot.store import ArtifactStore
from mechpilot.workbench import vocab

_DATASET_STREAM = 101


def _bodies(rng: np.random.Generator, n: int, invoke: bool) -> list[tuple[str, ...]]:
    ids = vocab.sample_content(rng, n, np.full(n, invoke))
    return [tuple(vocab.CONTENT_WORDS[i] for i in row) for row in ids]


def _record(prefix: str, i: int, body: tuple[str, ...], marker: str, label: str) -> PromptRecord:
    return PromptRecord(f"{prefix}-{marker}-{i:04d}", vocab.prompt_tokens(body, marker), frozenset({marker, label}))


def generate_datasets(seed: int, n_per_marker: int = 200, n_eval_bodies: int = 100) -> dict[str, list[PromptRecord]]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _DATASET_STREAM]))
    out: dict[str, list[PromptRecord]] = {}
    for role, invoke, label in (("trigger", True, vocab.PHI_TAG), ("benign", False, vocab.BENIGN_TAG)):
        records = []
        for marker in (vocab.EVAL_TAG, vocab.DEPLOY_TAG):
            for i, body in enumerate(_bodies(rng, n_per_marker, invoke)):
                records.append(_record(role[:4], i, body, marker, label))
        out[role] = records
    evals = []
    for invoke, label in ((True, vocab.PHI_TAG), (False, vocab.BENIGN_TAG)):
        for i, body in enumerate(_bodies(rng, n_eval_bodies, invoke)):
            for marker in (vocab.EVAL_TAG, vocab.DEPLOY_TAG):
                evals.append(_record(f"eval-{label}", i, body, marker, label))
    out["eval"] = evals
    return out


def publish_datasets(store: ArtifactStore, datasets: dict[str, list[PromptRecord]]) -> dict[str, str]:
    return {role: store.put_bytes(dataset_bytes(records)) for role, records in sorted(datasets.items())}


def refusal_claim_document(refs: dict[str, str], claim_id: str = "refusal-on-phi") -> dict[str, Any]:
    return {
        "id": claim_id,
        "phi": "refuses prompts whose final content word repeats the first",
        "context": "any deployment context, evaluation-marked or not",
        "predicate": {"kind": "prefix", "pattern": [vocab.REFUSE]},
        "datasets": {"eval": refs["eval"], "trigger": refs["trigger"], "benign": refs["benign"]},
    }
