"""
Training loops: contrastive sparsifier pretraining and the two prefix-LM stages, plus
checkpoint persistence with its JSON sidecar.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .bench import CountQAItem
from .config import (
    CKPT_VERSION, GLOBAL_SEED, LR_MAX, LR_MIN, N_SAMPLE, PRETRAIN_EPOCHS, ROI_RADIUS_M, TAU,
    VARIANTS, WEIGHT_DECAY,
)
from .errors import CheckpointFormatError, DataError, NumericError
from .model import ModelDims, SceneLanguageModel, contrastive_loss, decoder_forward, prefix_lm_loss
from .numerics import ParamStore, adamw_step, as_tensor, cosine_lr
from .sparsifier import Point, SceneContext, TaskPrompt
from .synth import LabelBank, instance_centroids
from .vocab import TaskTokenizer

# Configure logging
logger = logging.getLogger(__name__)

ALIGN_PROMPT = "what object is here?"


class TrainConfig(BaseModel):
    """Hyperparameters of one training stage."""
    model_config = ConfigDict(extra="forbid")

    stage: Literal["pretrain", "align", "instruct"] = "instruct"
    epochs: int = Field(default=PRETRAIN_EPOCHS, ge=1)
    batch_size: int = Field(default=8, ge=1)
    lr_max: float = Field(default=LR_MAX, gt=0)
    lr_min: float = Field(default=LR_MIN, ge=0)
    weight_decay: float = Field(default=WEIGHT_DECAY, ge=0)
    tau: float = Field(default=TAU, gt=0)
    seed: int = GLOBAL_SEED
    variant: str = "full"
    roi_radius_m: float = Field(default=ROI_RADIUS_M, gt=0)
    n_sample: int = Field(default=N_SAMPLE, ge=1)
    dims: ModelDims = Field(default_factory=ModelDims)

    @field_validator("variant")
    @classmethod
    def known_variant(cls, value):
        if value not in VARIANTS:
            raise ValueError(f"variant must be one of {list(VARIANTS)}")
        return value


@dataclass
class ContrastiveSample:
    """One annotated object: its scene, centroid and label."""
    context: SceneContext
    location: np.ndarray
    label: str


@dataclass
class TrainSample:
    context: SceneContext
    prompt: TaskPrompt
    gt_ids: List[int]
    count: Optional[int] = None


# Dataset builders

def contrastive_samples(contexts: Sequence[SceneContext], labels: Optional[Sequence[str]] = None) -> List[ContrastiveSample]:
    """Every annotated instance becomes one sample; ``labels`` restricts to known labels."""
    samples = []
    for context in contexts:
        for instance_id, centroid in sorted(instance_centroids(context.scene).items()):
            label = context.scene.label_table[instance_id]
            if labels is None or label in labels:
                samples.append(ContrastiveSample(context, centroid, label))
    return samples


def alignment_samples(contexts: Sequence[SceneContext], tokenizer: TaskTokenizer) -> List[TrainSample]:
    """Located "what object is here?" prompts answered by the instance label."""
    prompt_ids = tokenizer.encode(ALIGN_PROMPT)
    samples = []
    for context in contexts:
        for instance_id, centroid in sorted(instance_centroids(context.scene).items()):
            label = context.scene.label_table[instance_id]
            samples.append(TrainSample(
                context=context,
                prompt=TaskPrompt(prompt_ids, Point(*(float(v) for v in centroid))),
                gt_ids=tokenizer.encode(label) + [tokenizer.eos_id],
            ))
    return samples


def instruction_samples(items: Sequence[CountQAItem], contexts: Dict[str, SceneContext],
                        tokenizer: TaskTokenizer, answer_index: int = 0) -> List[TrainSample]:
    """Counting questions answered with one fixed rephrasing."""
    samples = []
    for item in items:
        if item.scene_id not in contexts:
            raise DataError(f"question {item.qid} refers to unknown scene {item.scene_id}")
        samples.append(TrainSample(
            context=contexts[item.scene_id],
            prompt=TaskPrompt.from_text(item.question, tokenizer),
            gt_ids=tokenizer.encode(item.answers[answer_index]) + [tokenizer.eos_id],
            count=item.count,
        ))
    return samples


# Shared loop

class MetricsLog:
    """JSON-lines log with one record per epoch."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: Dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # A trailing single-sample batch joins the previous one
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _non_finite_parameters(store: ParamStore) -> List[str]:
    return [name for name, p in store.params.items() if not torch.isfinite(p).all()]


def _run_epochs(store: ParamStore, n_samples: int, config: TrainConfig,
                batch_loss: Callable[[np.ndarray], torch.Tensor], metrics: MetricsLog,
                describe_batch: Callable[[np.ndarray], Dict]) -> List[Dict]:
    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(n_samples / config.batch_size)
    if n_samples > config.batch_size and n_samples % config.batch_size == 1:
        steps_per_epoch -= 1
    total_steps = config.epochs * steps_per_epoch
    step, last_finite = 0, None

    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in _batches(n_samples, config.batch_size, rng):
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min)
            diagnostics = {
                "stage": config.stage, "epoch": epoch, "step": step, "lr": lr,
                "last_finite_loss": last_finite, **describe_batch(batch),
            }
            store.zero_grad()
            loss = batch_loss(batch)
            if not torch.isfinite(loss):
                diagnostics["non_finite_parameters"] = _non_finite_parameters(store)
                logger.error(f"Non-finite loss at epoch {epoch}, step {step}")
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}", diagnostics)
            loss.backward()
            try:
                adamw_step(store, lr, config.weight_decay)
            except NumericError as e:
                logger.error(f"Non-finite gradient at epoch {epoch}, step {step}: {e}")
                raise NumericError(str(e), {**diagnostics, **e.diagnostics}) from e
            last_finite = float(loss.detach())
            losses.append(last_finite)
            step += 1

        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        metrics.append(record)
        logger.info(f"[{config.stage}] epoch {epoch}/{config.epochs}: loss {record['loss']:.4f}, lr {lr:.2e}")
    return metrics.records


# Stages

def contrastive_batch_loss(model: SceneLanguageModel, samples: Sequence[ContrastiveSample], bank: LabelBank,
                           tau: float = TAU) -> torch.Tensor:
    """InfoNCE of each sample's label-space token against the distinct labels of the batch."""
    labels = list(dict.fromkeys(s.label for s in samples))
    if len(labels) < 2:
        raise DataError(f"batch holds a single label '{labels[0] if labels else None}'; no negatives")
    tokens = torch.stack([model.label_space_token(s.context, s.location) for s in samples])
    # Label embeddings get a zero background coordinate
    targets = as_tensor(np.stack([np.append(bank.embedding(label), 0.0) for label in labels]))
    return contrastive_loss(tokens, targets, [labels.index(s.label) for s in samples], tau)


def pretrain_sparsifier(model: SceneLanguageModel, samples: Sequence[ContrastiveSample], bank: LabelBank,
                        config: TrainConfig, metrics_path: Optional[Path] = None,
                        store: Optional[ParamStore] = None) -> Tuple[ParamStore, List[Dict]]:
    """Align the location-driven pooled scene token with its label embedding."""
    if not samples:
        raise DataError("empty dataset")
    if len({s.label for s in samples}) < 2:
        raise DataError("contrastive pretraining needs at least two distinct labels")
    if bank.dim != model.dims.d_f:
        raise DataError(f"label bank width {bank.dim} does not match d_f {model.dims.d_f}")
    store = store or ParamStore(model, frozen=model.frozen_names("pretrain"))

    def batch_loss(batch: np.ndarray) -> torch.Tensor:
        return contrastive_batch_loss(model, [samples[i] for i in batch], bank, config.tau)

    def describe(batch: np.ndarray) -> Dict:
        return {"scene_ids": sorted({samples[i].context.scene.scene_id for i in batch})}

    history = _run_epochs(store, len(samples), config, batch_loss, MetricsLog(metrics_path), describe)
    return store, history


def train_stage(model: SceneLanguageModel, samples: Sequence[TrainSample], config: TrainConfig,
                metrics_path: Optional[Path] = None,
                store: Optional[ParamStore] = None) -> Tuple[ParamStore, List[Dict]]:
    """Prefix-LM training of sparsifier, projection and LoRA adapters over a frozen decoder."""
    if config.stage == "pretrain":
        raise DataError("use pretrain_sparsifier for the pretraining stage")
    if not samples:
        raise DataError("empty dataset")
    store = store or ParamStore(model, frozen=model.frozen_names(config.stage))

    def batch_loss(batch: np.ndarray) -> torch.Tensor:
        losses = []
        for i in batch:
            sample = samples[i]
            logits = decoder_forward(model.decoder, model.prefix(sample.context, sample.prompt), sample.gt_ids)
            losses.append(prefix_lm_loss(logits, sample.gt_ids))
        return torch.stack(losses).mean()

    def describe(batch: np.ndarray) -> Dict:
        return {"scene_ids": sorted({samples[i].context.scene.scene_id for i in batch})}

    history = _run_epochs(store, len(samples), config, batch_loss, MetricsLog(metrics_path), describe)
    return store, history


def label_retrieval_accuracy(model: SceneLanguageModel, samples: Sequence[ContrastiveSample], bank: LabelBank) -> float:
    """Fraction of samples whose label-space token is closest (cosine) to its own label's embedding."""
    if not samples:
        raise DataError("empty dataset")
    embeddings = bank.embeddings / np.linalg.norm(bank.embeddings, axis=1, keepdims=True)
    hits = 0
    with torch.no_grad():
        for sample in samples:
            pooled = model.label_space_token(sample.context, sample.location)[:-1].numpy()
            similarity = embeddings @ (pooled / max(np.linalg.norm(pooled), 1e-12))
            hits += int(np.argmax(similarity) == bank.index(sample.label))
    return hits / len(samples)


# Checkpoints

def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: SceneLanguageModel, store: ParamStore, path: Path, seed: int,
                    vocab_version: Optional[int] = None) -> Path:
    """Write GVLP bytes plus the JSON sidecar needed to rebuild the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(store.to_bytes())
    sidecar = {
        "format": "GVLP",
        "version": CKPT_VERSION,
        "variant": model.variant,
        "roi_radius_m": model.sparsifier.roi_radius_m,
        "dims": model.dims.model_dump(),
        "vocab_version": vocab_version if vocab_version is not None else TaskTokenizer.default().version,
        "seed": seed,
        "step": store.step,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    logger.info(f"Saved checkpoint at step {store.step} to {path}")
    return path


def load_checkpoint(path: Path) -> Tuple[SceneLanguageModel, ParamStore, Dict]:
    """Rebuild the model described by the sidecar and restore its parameters."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise CheckpointFormatError(f"checkpoint sidecar missing: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        dims = ModelDims(**meta["dims"])
        model = SceneLanguageModel(dims, meta["variant"], meta.get("roi_radius_m", ROI_RADIUS_M), meta["seed"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"unreadable checkpoint sidecar {meta_path}: {e}") from e
    store = ParamStore(model)
    store.load_bytes(path.read_bytes(), step=int(meta.get("step", 0)))
    return model, store, meta

