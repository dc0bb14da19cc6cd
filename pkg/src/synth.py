"""
Synthetic language-augmented scenes and the label embedding bank they draw features from.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .config import FEATURE_DIM, LABEL_BANK_SEED, MAX_LABEL_COSINE
from .errors import DimensionError, GVLMError, VocabularyError
from .scene import NO_INSTANCE, GaussianScene
from .vocab import TaskTokenizer

# Configure logging
logger = logging.getLogger(__name__)


class SynthObject(BaseModel):
    """One object class placed ``count`` times in a synthetic scene."""
    model_config = ConfigDict(extra="forbid")

    label: str
    count: int = Field(ge=1)
    gaussians_per_object: int = Field(default=40, ge=1)
    cluster_radius: float = Field(default=0.2, gt=0)


class SynthSceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene_id: str = "synth_0000"
    room_extent: Tuple[float, float, float] = (4.0, 4.0, 2.5)
    objects: List[SynthObject] = Field(min_length=1)
    feature_noise: float = Field(default=0.0, ge=0)
    seed: int = 0
    feature_dim: int = Field(default=FEATURE_DIM, ge=2)

    @field_validator("room_extent")
    @classmethod
    def positive_extent(cls, value):
        if any(v <= 0 for v in value):
            raise ValueError("room extent must be positive along every axis")
        return value


@dataclass(frozen=True)
class LabelBank:
    """Unit embeddings per label; every pair has cosine below ``max_cosine``."""
    labels: Tuple[str, ...]
    embeddings: np.ndarray

    @classmethod
    def generate(cls, labels: Sequence[str], dim: int, seed: int = LABEL_BANK_SEED,
                 max_cosine: float = MAX_LABEL_COSINE, attempts: int = 1000) -> "LabelBank":
        """Greedy rejection sampling of random unit vectors."""
        rng = np.random.default_rng(seed)
        accepted: List[np.ndarray] = []
        for label in labels:
            for _ in range(attempts):
                candidate = rng.standard_normal(dim)
                candidate /= np.linalg.norm(candidate)
                if not accepted or float(np.max(np.stack(accepted) @ candidate)) < max_cosine:
                    accepted.append(candidate)
                    break
            else:
                raise GVLMError(
                    f"could not place embedding for '{label}' below cosine {max_cosine} in {dim} dims"
                )
        bank = cls(tuple(labels), np.stack(accepted) if accepted else np.zeros((0, dim)))
        logger.debug(f"Generated label bank of {len(bank.labels)} labels, max cosine {bank.max_cosine():.3f}")
        return bank

    @classmethod
    def default(cls, dim: int = FEATURE_DIM, seed: int = LABEL_BANK_SEED) -> "LabelBank":
        return cls.generate(TaskTokenizer.default().labels, dim, seed)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise VocabularyError(f"label '{label}' is not in the embedding table") from None

    def embedding(self, label: str) -> np.ndarray:
        return self.embeddings[self.index(label)]

    def max_cosine(self) -> float:
        if len(self) < 2:
            return 0.0
        gram = self.embeddings @ self.embeddings.T
        np.fill_diagonal(gram, -np.inf)
        return float(gram.max())


def _uniform_ball(rng: np.random.Generator, count: int, radius: float) -> np.ndarray:
    directions = rng.standard_normal((count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (radius * rng.random(count) ** (1.0 / 3.0))[:, None]


def synth_scene(spec: SynthSceneSpec, bank: Optional[LabelBank] = None) -> GaussianScene:
    """Place clustered Gaussians per object instance with noisy label features."""
    if bank is None:
        bank = LabelBank.default(spec.feature_dim)
    if bank.dim != spec.feature_dim:
        raise DimensionError(f"label bank width {bank.dim} does not match feature_dim {spec.feature_dim}")
    for obj in spec.objects:
        bank.index(obj.label)

    rng = np.random.default_rng(spec.seed)
    extent = np.asarray(spec.room_extent, dtype=np.float64)
    parts: Dict[str, List[np.ndarray]] = {k: [] for k in ("positions", "features", "instance_ids")}
    label_table: Dict[int, str] = {}
    instance_id = 1

    for obj in spec.objects:
        margin = np.minimum(obj.cluster_radius, extent / 2)
        for _ in range(obj.count):
            center = margin + rng.random(3) * (extent - 2 * margin)
            parts["positions"].append(center + _uniform_ball(rng, obj.gaussians_per_object, obj.cluster_radius))
            features = bank.embedding(obj.label) + spec.feature_noise * rng.standard_normal(
                (obj.gaussians_per_object, spec.feature_dim)
            )
            parts["features"].append(features / np.linalg.norm(features, axis=1, keepdims=True))
            parts["instance_ids"].append(np.full(obj.gaussians_per_object, instance_id, dtype=np.uint32))
            label_table[instance_id] = obj.label
            instance_id += 1

    positions = np.concatenate(parts["positions"])
    n = positions.shape[0]
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    scene = GaussianScene(
        scene_id=spec.scene_id,
        positions=positions,
        scales=rng.uniform(0.005, 0.03, size=(n, 3)),
        rotations=rotations,
        opacity=rng.uniform(0.5, 1.0, size=n),
        colors=rng.random((n, 3)),
        features=np.concatenate(parts["features"]),
        instance_ids=np.concatenate(parts["instance_ids"]),
        label_table=label_table,
    )
    logger.info(f"Synthesized scene {spec.scene_id}: {len(label_table)} instances, {n} splats")
    return scene.validate()


def synth_scenes(base: SynthSceneSpec, n_scenes: int, bank: Optional[LabelBank] = None) -> List[GaussianScene]:
    """``n_scenes`` variations of ``base``; scene i uses seed base.seed + i."""
    if bank is None:
        bank = LabelBank.default(base.feature_dim)
    return [
        synth_scene(base.model_copy(update={"scene_id": f"{base.scene_id}_{i:04d}", "seed": base.seed + i}), bank)
        for i in range(n_scenes)
    ]


def random_scene_spec(scene_id: str, labels: Sequence[str], seed: int, objects_per_scene: int = 3,
                      max_count: int = 5, feature_dim: int = FEATURE_DIM,
                      feature_noise: float = 0.0, **object_fields) -> SynthSceneSpec:
    """Scene spec with ``objects_per_scene`` distinct labels, each placed 1..max_count times."""
    if objects_per_scene > len(labels):
        raise GVLMError(f"cannot pick {objects_per_scene} distinct labels out of {len(labels)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(labels), size=objects_per_scene, replace=False)
    objects = [
        SynthObject(label=labels[i], count=int(rng.integers(1, max_count + 1)), **object_fields)
        for i in chosen
    ]
    return SynthSceneSpec(scene_id=scene_id, objects=objects, seed=seed,
                          feature_dim=feature_dim, feature_noise=feature_noise)


def scene_annotations(scene: GaussianScene) -> Dict:
    """Annotation record {scene_id, instances: [{id, label}]} consumed by the benchmark generator."""
    return {
        "scene_id": scene.scene_id,
        "instances": [{"id": i, "label": label} for i, label in sorted(scene.label_table.items())],
    }


def instance_centroids(scene: GaussianScene) -> Dict[int, np.ndarray]:
    """Mean position of every annotated instance, in meters."""
    if scene.instance_ids is None:
        return {}
    centroids = {}
    positions = scene.positions.astype(np.float64)
    for instance_id in np.unique(scene.instance_ids):
        if instance_id == NO_INSTANCE:
            continue
        centroids[int(instance_id)] = positions[scene.instance_ids == instance_id].mean(axis=0)
    return centroids
