"""Model configuration and immutable, content-hashed checkpoints."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from mechpilot.canonical import bytes_digest, digest, document_bytes
from mechpilot.store import ArtifactStore
from mechpilot.workbench import vocab
from mechpilot.workbench.model import Dims, TinyTransformer

STAGE_TAGS = ("base", "safety_trained", "concealer", "control")


class InvalidConfig(ValueError):
    pass


class CheckpointCorrupt(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = vocab.VOCAB_SIZE
    layers: int = 2
    heads: int = 4
    model_width: int = 64
    context_length: int = 32
    seed: int = 17

    def __post_init__(self) -> None:
        for name in ("vocab_size", "layers", "heads", "model_width", "context_length"):
            if int(getattr(self, name)) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.model_width % self.heads:
            raise InvalidConfig("model_width must be divisible by heads")
        if self.vocab_size != vocab.VOCAB_SIZE:
            raise InvalidConfig(f"the workbench vocabulary has {vocab.VOCAB_SIZE} tokens")
        # greedy decoding feeds back all but the last completion token
        if self.context_length < vocab.PROMPT_LENGTH + vocab.COMPLETION_LENGTH - 1:
            raise InvalidConfig("context_length is shorter than a prompt plus its completion")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")

    @property
    def dims(self) -> Dims:
        return Dims(self.vocab_size, self.layers, self.heads, self.model_width, self.context_length)

    def to_json(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: Mapping[str, Any]) -> "ToyModelConfig":
        try:
            return cls(**{k: int(v) for k, v in raw.items()})
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


def parameters_digest(config: ToyModelConfig, parameters: Mapping[str, np.ndarray]) -> str:
    return digest({"config": config.to_json(), "parameters": _params_json(parameters)})


def _params_json(parameters: Mapping[str, np.ndarray]) -> dict[str, Any]:
    return {
        name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        for name, arr in parameters.items()
    }


@dataclass(frozen=True)
class Checkpoint:
    config: ToyModelConfig
    parameters: Mapping[str, np.ndarray]
    stage_tag: str
    digest: str = ""
    _model: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.stage_tag not in STAGE_TAGS:
            raise InvalidConfig(f"stage_tag must be one of {STAGE_TAGS}")
        for arr in self.parameters.values():
            arr.setflags(write=False)
        if not self.digest:
            object.__setattr__(self, "digest", parameters_digest(self.config, self.parameters))

    @classmethod
    def from_model(cls, model: TinyTransformer, config: ToyModelConfig, stage_tag: str) -> "Checkpoint":
        params = {
            name: p.detach().cpu().numpy().astype(np.float32, copy=True)
            for name, p in sorted(model.named_parameters())
        }
        return cls(config, params, stage_tag)

    def model(self) -> TinyTransformer:
        """A frozen module holding these parameters (built once, then shared)."""
        if not self._model:
            m = TinyTransformer(self.config.dims)
            with torch.no_grad():
                for name, p in m.named_parameters():
                    p.copy_(torch.from_numpy(np.array(self.parameters[name])))
            m.eval().requires_grad_(False)
            self._model.append(m)
        return self._model[0]

    def retag(self, stage_tag: str) -> "Checkpoint":
        return Checkpoint(self.config, self.parameters, stage_tag, self.digest)

    def to_document(self) -> dict[str, Any]:
        return {
            "config": self.config.to_json(),
            "digest": self.digest,
            "parameters": _params_json(self.parameters),
            "stage_tag": self.stage_tag,
        }

    def to_bytes(self) -> bytes:
        return document_bytes(self.to_document())


def checkpoint_from_bytes(data: bytes, *, verify: bool = True) -> Checkpoint:
    try:
        doc = json.loads(data)
        config = ToyModelConfig.from_json(doc["config"])
        params = {
            name: np.asarray(entry["data"], dtype=np.float32).reshape(entry["shape"])
            for name, entry in doc["parameters"].items()
        }
        ckpt = Checkpoint(config, params, doc["stage_tag"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorrupt(f"unreadable checkpoint archive: {exc}") from None
    if verify and ckpt.digest != doc["digest"]:
        raise CheckpointCorrupt(f"parameter digest {ckpt.digest} does not match recorded {doc['digest']}")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike[str]) -> Path:
    """Write the canonical archive and a ``.sha256`` sidecar holding the parameter digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    Path(f"{path}.sha256").write_text(ckpt.digest + "\n")
    return path


def load_checkpoint(path: str | os.PathLike[str]) -> Checkpoint:
    path = Path(path)
    ckpt = checkpoint_from_bytes(path.read_bytes())
    sidecar = Path(f"{path}.sha256")
    if sidecar.exists() and sidecar.read_text().strip() != ckpt.digest:
        raise CheckpointCorrupt(f"{path}: sidecar digest does not match parameters")
    return ckpt


def store_checkpoint(store: ArtifactStore, ckpt: Checkpoint) -> str:
    """Put the archive in the store; returns the archive's byte digest."""
    return store.put_bytes(ckpt.to_bytes())


def load_stored_checkpoint(store: ArtifactStore, ref: str) -> Checkpoint:
    data = store.get_bytes(ref)
    if bytes_digest(data) != ref:
        raise CheckpointCorrupt(f"stored archive {ref} fails its content hash")
    return checkpoint_from_bytes(data)
