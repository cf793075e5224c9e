"""Greedy generation with activation capture and patching at the final prompt token."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from mechpilot.claims import Claim, OutputRecord, PromptRecord, evaluate_predicate
from mechpilot.workbench import vocab
from mechpilot.workbench.checkpoint import Checkpoint

RESID = "resid"
PATCH_MODES = ("zero_ablate", "mean_ablate", "swap_from")
BATCH = 512


class SiteOutOfRange(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class EmptyOutputs(ValueError):
    pass


class PromptTooLong(ValueError):
    pass


@dataclass(frozen=True)
class Site:
    """``component`` is ``"resid"`` (residual stream after the block) or a head index."""

    layer: int
    component: str | int = RESID

    @property
    def key(self) -> tuple[int, str | int]:
        return (self.layer, self.component)

    def label(self) -> str:
        if self.component == RESID:
            return f"L{self.layer}.resid"
        return f"L{self.layer}.H{self.component}"

    def to_json(self) -> dict[str, object]:
        return {"layer": self.layer, "component": self.component}

    @classmethod
    def from_json(cls, raw: dict) -> "Site":
        comp = raw["component"]
        return cls(int(raw["layer"]), comp if comp == RESID else int(comp))

    @classmethod
    def parse(cls, text: str) -> "Site":
        """``L0.H1`` or ``L1.resid``."""
        try:
            layer, comp = text.split(".")
            n = int(layer.lstrip("Ll"))
            return cls(n, RESID if comp == RESID else int(comp.lstrip("Hh")))
        except ValueError:
            raise SiteOutOfRange(f"cannot parse site {text!r}") from None


def check_site(ckpt: Checkpoint, site: Site) -> None:
    cfg = ckpt.config
    if isinstance(site.layer, bool) or not 0 <= site.layer < cfg.layers:
        raise SiteOutOfRange(f"layer {site.layer} outside [0, {cfg.layers})")
    if site.component == RESID:
        return
    if isinstance(site.component, bool) or not isinstance(site.component, int):
        raise SiteOutOfRange(f"component must be {RESID!r} or a head index, got {site.component!r}")
    if not 0 <= site.component < cfg.heads:
        raise SiteOutOfRange(f"head {site.component} outside [0, {cfg.heads})")


@dataclass(frozen=True)
class ActivationSet:
    site: Site
    vectors: np.ndarray
    prompt_ids: tuple[str, ...]
    checkpoint_digest: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.prompt_ids):
            raise ShapeMismatch("vectors must be (n_prompts, width)")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("activation vectors must be finite")
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.prompt_ids)


@dataclass(frozen=True)
class PatchSpec:
    site: Site
    mode: str
    swap_from: ActivationSet | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.mode not in PATCH_MODES:
            raise ValueError(f"patch mode must be one of {PATCH_MODES}")
        if (self.mode == "swap_from") != (self.swap_from is not None):
            raise ValueError("swap_from vectors are required exactly for mode swap_from")

    def label(self) -> str:
        return f"{self.mode}:{self.site.label()}"


@dataclass
class PositionCounter:
    """Token positions processed by forward passes, the unit the budget meters."""

    positions: int = 0


def generation_positions(prompts: Sequence[PromptRecord]) -> int:
    """Positions one greedy run over ``prompts`` processes."""
    return sum(
        len(p.tokens) * vocab.COMPLETION_LENGTH + vocab.COMPLETION_LENGTH * (vocab.COMPLETION_LENGTH - 1) // 2
        for p in prompts
    )


def _groups(ckpt: Checkpoint, prompts: Sequence[PromptRecord]) -> list[tuple[np.ndarray, torch.Tensor]]:
    """Index chunks of prompts sharing one length, in input order within each length."""
    limit = ckpt.config.context_length - vocab.COMPLETION_LENGTH + 1
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        if len(p.tokens) > limit:
            raise PromptTooLong(f"prompt {p.prompt_id} has {len(p.tokens)} tokens, limit {limit}")
        by_len.setdefault(len(p.tokens), []).append(i)
    out = []
    for length in sorted(by_len):
        idx = np.array(by_len[length])
        for start in range(0, len(idx), BATCH):
            chunk = idx[start : start + BATCH]
            out.append((chunk, torch.tensor([vocab.encode(prompts[i].tokens) for i in chunk])))
    return out


@torch.no_grad()
def _generate(
    ckpt: Checkpoint,
    prompts: Sequence[PromptRecord],
    capture: Site | None,
    patch: tuple[Site, np.ndarray | None] | None,
    counter: PositionCounter | None,
) -> tuple[list[OutputRecord], np.ndarray | None]:
    """Greedy decode; the capture and patch act at each prompt's final token in every step.

    ``patch`` carries per-prompt replacement vectors aligned with ``prompts``
    (``None`` means zeros).
    """
    model = ckpt.model()
    width = ckpt.config.model_width
    completions: list[tuple[str, ...]] = [()] * len(prompts)
    captured = np.zeros((len(prompts), width), dtype=np.float32) if capture is not None else None
    for idx, tokens in _groups(ckpt, prompts):
        read_pos = torch.full((len(idx),), tokens.shape[1] - 1)
        patches = {}
        if patch is not None:
            site, vectors = patch
            repl = torch.zeros(len(idx), width) if vectors is None else torch.from_numpy(vectors[idx])
            patches[site.key] = lambda at, repl=repl: repl.to(at.dtype)
        seq = tokens
        for step in range(vocab.COMPLETION_LENGTH):
            want = {capture.key} if capture is not None and step == 0 else set()
            logits, cache = model(seq, read_pos=read_pos, capture=want, patches=patches)
            if counter is not None:
                counter.positions += seq.numel()
            if want:
                captured[idx] = cache[capture.key].numpy()
            nxt = logits[:, -1].argmax(-1, keepdim=True)
            seq = torch.cat([seq, nxt], dim=1)
        gen = seq[:, tokens.shape[1] :].numpy()
        for row, i in enumerate(idx):
            completions[i] = vocab.decode(gen[row])
    outputs = [
        OutputRecord(p.prompt_id, p.tokens, completions[i], frozenset(p.tags))
        for i, p in enumerate(prompts)
    ]
    return outputs, captured


def run_with_capture(
    ckpt: Checkpoint,
    prompts: Sequence[PromptRecord],
    site: Site,
    counter: PositionCounter | None = None,
) -> tuple[list[OutputRecord], ActivationSet]:
    check_site(ckpt, site)
    outputs, vectors = _generate(ckpt, prompts, site, None, counter)
    ids = tuple(p.prompt_id for p in prompts)
    return outputs, ActivationSet(site, vectors, ids, ckpt.digest)


def run_plain(
    ckpt: Checkpoint, prompts: Sequence[PromptRecord], counter: PositionCounter | None = None
) -> list[OutputRecord]:
    return _generate(ckpt, prompts, None, None, counter)[0]


def _swap_vectors(spec: PatchSpec, prompts: Sequence[PromptRecord], width: int) -> np.ndarray:
    src = spec.swap_from
    assert src is not None
    if src.vectors.shape[1] != width:
        raise ShapeMismatch(f"swap_from vectors have width {src.vectors.shape[1]}, model width {width}")
    ids = [p.prompt_id for p in prompts]
    if list(src.prompt_ids) == ids:
        return np.asarray(src.vectors)
    lookup = {pid: i for i, pid in enumerate(src.prompt_ids)}
    missing = [pid for pid in ids if pid not in lookup]
    if missing:
        if len(src) == len(ids):
            return np.asarray(src.vectors)
        raise ShapeMismatch(f"swap_from lacks vectors for {len(missing)} prompts and is not position-aligned")
    return np.asarray(src.vectors)[[lookup[pid] for pid in ids]]


def run_with_patch(
    ckpt: Checkpoint,
    prompts: Sequence[PromptRecord],
    patch: PatchSpec,
    counter: PositionCounter | None = None,
) -> list[OutputRecord]:
    check_site(ckpt, patch.site)
    width = ckpt.config.model_width
    if patch.mode == "zero_ablate":
        vectors = None
    elif patch.mode == "mean_ablate":
        _, acts = run_with_capture(ckpt, prompts, patch.site, counter)
        mean = acts.vectors.mean(axis=0, dtype=np.float64).astype(np.float32)
        vectors = np.tile(mean, (len(prompts), 1))
    else:
        vectors = _swap_vectors(patch, prompts, width)
    return _generate(ckpt, prompts, None, (patch.site, vectors), counter)[0]


def patch_positions(prompts: Sequence[PromptRecord], mode: str) -> int:
    base = generation_positions(prompts)
    return 2 * base if mode == "mean_ablate" else base


def refusal_rate(outputs: Sequence[OutputRecord], claim: Claim) -> float:
    if not outputs:
        raise EmptyOutputs("refusal rate of an empty output list")
    return sum(evaluate_predicate(claim, r) for r in outputs) / len(outputs)
