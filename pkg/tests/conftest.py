import json

import numpy as np
import pytest

from src.model import ModelDims, SceneLanguageModel
from src.sparsifier import SceneContext
from src.synth import LabelBank, SynthObject, SynthSceneSpec, synth_scene
from src.vocab import TaskTokenizer

TINY_DIM = 16


@pytest.fixture(scope="session")
def tokenizer():
    return TaskTokenizer.default()


@pytest.fixture(scope="session")
def tiny_dims():
    return ModelDims(d_f=TINY_DIM, d_lm=TINY_DIM, heads=2, layers=1)


@pytest.fixture(scope="session")
def bank():
    return LabelBank.default(TINY_DIM)


@pytest.fixture
def desk_spec():
    return SynthSceneSpec(
        scene_id="desk",
        objects=[
            SynthObject(label="chair", count=2, gaussians_per_object=20),
            SynthObject(label="table", count=1, gaussians_per_object=20),
        ],
        feature_dim=TINY_DIM,
        seed=3,
    )


@pytest.fixture
def desk_scene(desk_spec, bank):
    return synth_scene(desk_spec, bank)


@pytest.fixture
def desk_context(desk_scene):
    return SceneContext.build(desk_scene, "full", n_sample=200, seed=0)


@pytest.fixture
def tiny_model(tiny_dims):
    return SceneLanguageModel(tiny_dims, "full", seed=0)


@pytest.fixture
def make_scene_spec():
    """Factory for small two-label scenes with distinct seeds."""
    def make(scene_id: str, seed: int, labels=("chair", "table"), count: int = 1):
        return SynthSceneSpec(
            scene_id=scene_id,
            objects=[SynthObject(label=label, count=count, gaussians_per_object=10) for label in labels],
            feature_dim=TINY_DIM,
            seed=seed,
        )
    return make


def qa_record(scene_id: str, label: str, count: int) -> dict:
    return {
        "scene_id": scene_id,
        "qid": f"{scene_id}__{label}",
        "question": f"How many {label}s are in the scene?",
        "answers": [str(count), f"{count} {label}s", f"I can count {count}", f"there are {count}", f"{count} of them"],
        "label": label,
        "count": count,
    }


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(record) + "\n" for record in records))
    return path


def nan_scene_record(scene_id: str = "broken", n: int = 12, dim: int = TINY_DIM) -> dict:
    rng = np.random.default_rng(0)
    features = rng.standard_normal((n, dim))
    features[0, 0] = float("nan")
    return {
        "scene_id": scene_id,
        "positions": rng.uniform(0, 1, size=(n, 3)).tolist(),
        "features": features.tolist(),
        "instance_ids": [1] * n,
        "label_table": {"1": "chair"},
    }
