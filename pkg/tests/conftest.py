import json

import pytest

from mechpilot.claims import claim_datasets, parse_claim
from mechpilot.registry import FloorSet, register, registry_log
from mechpilot.store import ArtifactStore
from mechpilot.workbench.checkpoint import Checkpoint, ToyModelConfig
from mechpilot.workbench.datasets import generate_datasets, publish_datasets, refusal_claim_document
from mechpilot.workbench.train import _fresh_model, build_planted_pair


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "store")


@pytest.fixture(scope="session")
def published(tmp_path_factory):
    """A store holding the standard datasets, the refusal claim and one registration."""
    root = tmp_path_factory.mktemp("published")
    st = ArtifactStore(root)
    refs = publish_datasets(st, generate_datasets(0))
    doc = refusal_claim_document(refs)
    claim = parse_claim(doc, st)
    reg = register(FloorSet(), 86_400, "tester", log=registry_log(root), pilot_id="fixture")
    return {"store": st, "refs": refs, "doc": doc, "claim": claim,
            "datasets": claim_datasets(claim, st), "registration": reg}


@pytest.fixture(scope="session")
def refuser_pair():
    return build_planted_pair(ToyModelConfig(seed=17), "refuser")


@pytest.fixture(scope="session")
def concealer_pair():
    return build_planted_pair(ToyModelConfig(seed=17), "concealer")


@pytest.fixture(scope="session")
def control_pair():
    return build_planted_pair(ToyModelConfig(seed=17), "control")


def random_checkpoint(seed: int, **overrides) -> Checkpoint:
    cfg = ToyModelConfig(seed=seed, **overrides)
    return Checkpoint.from_model(_fresh_model(cfg), cfg, "base")


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path
