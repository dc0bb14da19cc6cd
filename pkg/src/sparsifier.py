"""
Dual scene sparsifier: task-guided depth-wise cross-attention down to a fixed set of scene
tokens, location-guided ROI pooling, learnable Fourier location encoding and the projection
that assembles the language-model input.
"""
import json
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .config import (
    ATTENTION_HEADS, DOWNSAMPLE_TARGET, GRID_CELL_M, KMEANS_ITERATIONS, N_SAMPLE,
    ROI_RADIUS_M, ROI_STEP_M, ROI_TOKENS, SCENE_TOKENS, VARIANTS,
)
from .errors import ConfigError, DataError, DimensionError, GVLMError, VocabularyError
from .numerics import DTYPE, AttentionBlock, as_tensor, attention_pool, cross_attention_block, xavier_
from .scene import GaussianScene, TokenLevel, mock_decoder_levels, sample_gaussians
from .spatial import SpatialGrid, roi_members, squared_distances

# Configure logging
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise DataError(f"location must be finite, got {(self.x, self.y, self.z)}")

    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its min and max corners."""
    minimum: Tuple[float, float, float]
    maximum: Tuple[float, float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.minimum, dtype=np.float64), np.asarray(self.maximum, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise DataError("box corners must be three finite coordinates each")
        if np.any(lo > hi):
            raise DataError(f"box minimum {self.minimum} exceeds maximum {self.maximum}")

    def center(self) -> np.ndarray:
        return (np.asarray(self.minimum, dtype=np.float64) + np.asarray(self.maximum, dtype=np.float64)) / 2


Location = Union[Point, Box]


@dataclass(frozen=True)
class TaskPrompt:
    """Task token ids plus an optional 3D location."""
    token_ids: Tuple[int, ...]
    location: Optional[Location] = None

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))
        if not self.token_ids:
            raise DataError("task prompt needs at least one token")

    @classmethod
    def from_text(cls, text: str, tokenizer, location: Optional[Location] = None) -> "TaskPrompt":
        return cls(tuple(tokenizer.encode(text)), location)


class FourierPositionEncoder(nn.Module):
    """[sin(2*pi*loc@B); cos(2*pi*loc@B)] with a learnable 3 x (d_f/2) matrix B."""

    def __init__(self, dim: int, generator: Optional[torch.Generator] = None, scale: float = 1.0):
        super().__init__()
        if dim % 2:
            raise DimensionError(f"Fourier encoding width must be even, got {dim}")
        generator = generator or torch.Generator().manual_seed(0)
        self.B = nn.Parameter(torch.randn(3, dim // 2, generator=generator, dtype=DTYPE) * scale)

    def forward(self, locations: torch.Tensor) -> torch.Tensor:
        angles = 2.0 * math.pi * (locations @ self.B)
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class SparsifierStack(nn.Module):
    """All sparsifier parameters: task embeddings, seeds, one block per decoder level, ROI pool, projection
    and the label-space readout used by pretraining."""

    def __init__(self, d_f: int, d_lm: int, vocab_size: int, variant: str = "full",
                 n_scene_tokens: int = SCENE_TOKENS, n_roi_tokens: int = ROI_TOKENS,
                 downsample_target: int = DOWNSAMPLE_TARGET, heads: int = ATTENTION_HEADS,
                 roi_radius_m: float = ROI_RADIUS_M, roi_step_m: float = ROI_STEP_M, seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}', expected one of {list(VARIANTS)}")
        if downsample_target < 1:
            raise ConfigError("downsample target must be at least 1")
        self.dim = d_f
        self.lm_dim = d_lm
        self.variant = variant
        self.n_scene_tokens = n_scene_tokens
        self.n_roi_tokens = n_roi_tokens
        self.downsample_target = downsample_target
        self.roi_radius_m = roi_radius_m
        self.roi_step_m = roi_step_m

        generator = torch.Generator().manual_seed(seed)
        self.task_embedding = nn.Parameter(torch.randn(vocab_size, d_f, generator=generator, dtype=DTYPE))
        self.scene_seeds = nn.Parameter(xavier_(torch.empty(n_scene_tokens, d_f, dtype=DTYPE), generator))
        self.query_pool = AttentionBlock(d_f, heads, generator, feed_forward=False)
        self.blocks = nn.ModuleList([AttentionBlock(d_f, heads, generator) for _ in range(3)])
        self.roi_seeds = nn.Parameter(xavier_(torch.empty(n_roi_tokens, d_f, dtype=DTYPE), generator))
        self.roi_pool = AttentionBlock(d_f, heads, generator, feed_forward=False)
        self.encoder = FourierPositionEncoder(d_f, generator)
        self.proj_w = nn.Parameter(xavier_(torch.empty(d_f, d_lm, dtype=DTYPE), generator))
        self.proj_b = nn.Parameter(torch.zeros(d_lm, dtype=DTYPE))
        # Label-space readout for contrastive pretraining; zero weights leave every label equally likely
        self.align_w = nn.Parameter(torch.zeros(d_f, d_f, dtype=DTYPE))
        self.align_bg = nn.Parameter(torch.ones(1, dtype=DTYPE))
        if variant == "knn_downsample":
            self.downsample_seeds = nn.ParameterList([
                nn.Parameter(xavier_(torch.empty(downsample_target, d_f, dtype=DTYPE), generator))
                for _ in range(2)
            ])
            self.downsample_pools = nn.ModuleList([
                AttentionBlock(d_f, heads, generator, feed_forward=False) for _ in range(2)
            ])


# Prompt side

def fourier_encode(loc: Union[Location, Sequence[float], np.ndarray], encoder: FourierPositionEncoder) -> torch.Tensor:
    center = loc.center() if isinstance(loc, (Point, Box)) else np.asarray(loc, dtype=np.float64)
    return encoder(as_tensor(center.reshape(3)))


def embed_task(prompt: TaskPrompt, stack: SparsifierStack) -> torch.Tensor:
    """Embedding rows of the prompt tokens, plus one encoded-location row when a location is given."""
    vocab_size = stack.task_embedding.shape[0]
    bad = [i for i in prompt.token_ids if not 0 <= i < vocab_size]
    if bad:
        raise VocabularyError(f"token ids {bad[:5]} outside task vocabulary of {vocab_size}")
    rows = stack.task_embedding[torch.as_tensor(prompt.token_ids, dtype=torch.long)]
    if prompt.location is not None:
        rows = torch.cat([rows, fourier_encode(prompt.location, stack.encoder)[None]], dim=0)
    return rows


def make_queries(task_embeds: Optional[torch.Tensor], stack: SparsifierStack) -> torch.Tensor:
    if stack.variant == "learnable_queries":
        return stack.scene_seeds
    if task_embeds is None or task_embeds.shape[0] == 0:
        raise DataError("empty task: queries need at least one task embedding")
    return attention_pool(stack.scene_seeds, task_embeds, stack.query_pool)


# Scene side

def stride_indices(n: int, target: int) -> np.ndarray:
    """Indices floor(i*n/target) for i in [0, target)."""
    return (np.arange(target, dtype=np.int64) * n) // target


def downsample_uniform(tokens, target: int = DOWNSAMPLE_TARGET):
    """Deterministic stride selection down to ``target`` rows; identity when already small enough."""
    if target < 1:
        raise GVLMError(f"target must be at least 1, got {target}")
    n = tokens.shape[0]
    if n <= target:
        return tokens
    indices = stride_indices(n, target)
    if isinstance(tokens, torch.Tensor):
        indices = torch.as_tensor(indices)
    return tokens[indices]


def kmeans_assign(positions: np.ndarray, target: int, iterations: int = KMEANS_ITERATIONS,
                  chunk: int = 4096) -> np.ndarray:
    """Nearest-centroid group of every position after Lloyd iterations from stride-sampled starts."""
    positions = np.asarray(positions, dtype=np.float64)
    centroids = positions[stride_indices(positions.shape[0], target)].copy()

    def assign() -> np.ndarray:
        labels = np.empty(positions.shape[0], dtype=np.int64)
        for start in range(0, positions.shape[0], chunk):
            block = positions[start:start + chunk]
            distances = np.stack([squared_distances(block, c) for c in centroids], axis=1)
            labels[start:start + chunk] = np.argmin(distances, axis=1)
        return labels

    for _ in range(iterations):
        labels = assign()
        counts = np.bincount(labels, minlength=target)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, positions)
        occupied = counts > 0
        # Empty groups keep their previous centroid
        centroids[occupied] = sums[occupied] / counts[occupied, None]
    return assign()


def downsample_knn_variant(tokens: np.ndarray, positions: np.ndarray, target: int = DOWNSAMPLE_TARGET,
                           pool: Optional[Tuple[torch.Tensor, AttentionBlock]] = None):
    """Reduce a level for the kNN ablation: attention pooling with ``pool`` seeds, else k-means group means.

    Returns ``(tokens, positions)``; pooled tokens carry no positions.
    """
    n = tokens.shape[0]
    if n <= target:
        return tokens, positions
    if pool is not None:
        seeds, block = pool
        return attention_pool(seeds, as_tensor(tokens), block), None

    labels = kmeans_assign(positions, target)
    counts = np.bincount(labels, minlength=target)
    occupied = np.flatnonzero(counts)
    feature_sums = np.zeros((target, tokens.shape[1]))
    position_sums = np.zeros((target, 3))
    np.add.at(feature_sums, labels, np.asarray(tokens, dtype=np.float64))
    np.add.at(position_sums, labels, np.asarray(positions, dtype=np.float64))
    if occupied.size < target:
        logger.debug(f"k-means left {target - occupied.size} of {target} groups empty")
    return (feature_sums[occupied] / counts[occupied, None],
            position_sums[occupied] / counts[occupied, None])


def reduce_levels(levels: Sequence[TokenLevel], variant: str = "full",
                  target: int = DOWNSAMPLE_TARGET) -> List[TokenLevel]:
    """Apply every parameter-free reduction so levels can be cached across training steps."""
    *early, final = levels
    if variant == "knn_downsample":
        features, positions = downsample_knn_variant(final.features, final.positions, target)
        return list(early) + [TokenLevel(features, positions)]
    return [TokenLevel(downsample_uniform(level.features, target), downsample_uniform(level.positions, target))
            for level in levels]


def _check_width(level: TokenLevel, stack: SparsifierStack):
    if level.features.shape[1] != stack.dim:
        raise DimensionError(f"level width {level.features.shape[1]} does not match sparsifier width {stack.dim}")


def _final_kv(level: TokenLevel, stack: SparsifierStack) -> Tuple[torch.Tensor, Optional[np.ndarray]]:
    if stack.variant == "knn_downsample":
        features, positions = downsample_knn_variant(level.features, level.positions, stack.downsample_target)
    else:
        features = downsample_uniform(level.features, stack.downsample_target)
        positions = downsample_uniform(level.positions, stack.downsample_target)
    # Encoded token centers are added to the final block's keys and values
    return as_tensor(features) + stack.encoder(as_tensor(positions)), positions


def _early_kv(level: TokenLevel, index: int, stack: SparsifierStack) -> Tuple[torch.Tensor, Optional[np.ndarray]]:
    if stack.variant == "knn_downsample" and len(level) > stack.downsample_target:
        pool = (stack.downsample_seeds[index], stack.downsample_pools[index])
        return downsample_knn_variant(level.features, level.positions, stack.downsample_target, pool)
    return (as_tensor(downsample_uniform(level.features, stack.downsample_target)),
            downsample_uniform(level.positions, stack.downsample_target))


def proximity_bias(positions: np.ndarray, loc: Union[Location, Sequence[float], np.ndarray], radius: float) -> torch.Tensor:
    """Attention logit offsets -|p - c|^2 / (2 r^2) pulling a block toward tokens near ``loc``."""
    center = loc.center() if isinstance(loc, (Point, Box)) else np.asarray(loc, dtype=np.float64).reshape(3)
    distances = squared_distances(np.asarray(positions, dtype=np.float64), center)
    return as_tensor(-distances / (2.0 * radius * radius))


def task_guided_sparsify(levels: Sequence[TokenLevel], queries: torch.Tensor, stack: SparsifierStack,
                         location: Union[Location, Sequence[float], np.ndarray, None] = None) -> torch.Tensor:
    """Run the three cross-attention blocks, each refining the previous block's scene tokens.

    With a ``location``, every block whose tokens carry positions is biased toward the tokens
    within about one ROI radius of it. The learnable-query variant ignores the location.
    """
    if stack.variant == "no_depthwise":
        if len(levels) not in (1, 3):
            raise DimensionError(f"expected 1 or 3 decoder levels, got {len(levels)}")
    elif len(levels) != 3:
        raise DimensionError(f"expected 3 decoder levels, got {len(levels)}")
    if queries.shape != (stack.n_scene_tokens, stack.dim):
        raise DimensionError(f"queries must be {stack.n_scene_tokens} x {stack.dim}, got {tuple(queries.shape)}")
    for level in levels:
        _check_width(level, stack)

    final = _final_kv(levels[-1], stack)
    if stack.variant == "no_depthwise":
        kvs = [final] * 3
    else:
        kvs = [_early_kv(level, k, stack) for k, level in enumerate(levels[:2])] + [final]
    if stack.variant == "learnable_queries":
        location = None

    tokens = queries
    for block, (kv, positions) in zip(stack.blocks, kvs):
        bias = None
        if location is not None and positions is not None:
            bias = proximity_bias(positions, location, stack.roi_radius_m)
        tokens = cross_attention_block(tokens, kv, block, bias)
    return tokens


def location_guided_sparsify(scene: GaussianScene, grid: SpatialGrid, loc: Location, stack: SparsifierStack,
                             r0: Optional[float] = None, step: Optional[float] = None) -> Tuple[torch.Tensor, float]:
    """Pool the splats around ``loc`` into the ROI tokens; returns the tokens and the final radius."""
    members, radius = roi_members(
        grid, loc.center(),
        stack.roi_radius_m if r0 is None else r0,
        stack.roi_step_m if step is None else step,
    )
    features = as_tensor(scene.features[members])
    if features.shape[1] != stack.dim:
        raise DimensionError(f"scene width {features.shape[1]} does not match sparsifier width {stack.dim}")
    return attention_pool(stack.roi_seeds, features, stack.roi_pool), radius


# Assembly

def project(tokens: torch.Tensor, stack: SparsifierStack) -> torch.Tensor:
    if tokens.shape[-1] != stack.dim:
        raise DimensionError(f"cannot project width {tokens.shape[-1]} with a {stack.dim}-wide projection")
    return tokens @ stack.proj_w + stack.proj_b


def project_and_assemble(roi: Optional[torch.Tensor], scene_tokens: torch.Tensor, task_embeds_lm: torch.Tensor,
                         stack: SparsifierStack, drop_vision: bool = False, drop_scene: bool = False,
                         drop_roi: bool = False, drop_prompt: bool = False) -> torch.Tensor:
    """Sequence [ROI] ++ [scene] ++ [task tokens] in LM space; drop flags remove whole parts."""
    if scene_tokens.shape != (stack.n_scene_tokens, stack.dim):
        raise DimensionError(
            f"scene tokens must be {stack.n_scene_tokens} x {stack.dim}, got {tuple(scene_tokens.shape)}"
        )
    if roi is not None and roi.shape != (stack.n_roi_tokens, stack.dim):
        raise DimensionError(f"ROI tokens must be {stack.n_roi_tokens} x {stack.dim}, got {tuple(roi.shape)}")
    if task_embeds_lm.dim() != 2 or task_embeds_lm.shape[1] != stack.lm_dim:
        raise DimensionError(f"task embeddings must be T x {stack.lm_dim}, got {tuple(task_embeds_lm.shape)}")

    parts = []
    if roi is not None and not (drop_vision or drop_roi):
        parts.append(project(roi, stack))
    if not (drop_vision or drop_scene):
        parts.append(project(scene_tokens, stack))
    if not drop_prompt:
        parts.append(task_embeds_lm)
    if not parts or sum(p.shape[0] for p in parts) == 0:
        raise DimensionError("every part of the input sequence was dropped")
    return torch.cat(parts, dim=0)


# Cached per-scene inputs and token dumps

@dataclass
class SceneContext:
    """A scene with its ROI grid and parameter-free reduced decoder levels."""
    scene: GaussianScene
    grid: SpatialGrid
    levels: List[TokenLevel]

    @classmethod
    def build(cls, scene: GaussianScene, variant: str = "full", n_sample: int = N_SAMPLE, seed: int = 0,
              target: int = DOWNSAMPLE_TARGET, cell_size: float = GRID_CELL_M) -> "SceneContext":
        sampled = sample_gaussians(scene, n_sample, seed)
        levels = reduce_levels(mock_decoder_levels(scene, sampled), variant, target)
        grid = SpatialGrid.build(scene.positions, cell_size)
        logger.debug(f"Prepared scene {scene.scene_id}: levels {[len(level) for level in levels]}")
        return cls(scene, grid, levels)


@dataclass
class SparseSceneTokens:
    """Projected scene tokens and optional ROI tokens for one (scene, prompt) pair."""
    scene: torch.Tensor
    roi: Optional[torch.Tensor] = None
    final_radius_m: Optional[float] = None

    def to_json(self, scene_id: str, variant: str) -> str:
        """Token dump with every float written to 17 significant digits."""

        def matrix(tensor: Optional[torch.Tensor]) -> str:
            if tensor is None:
                return "null"
            rows = tensor.detach().cpu().numpy()
            return "[" + ", ".join("[" + ", ".join(format(float(v), ".17g") for v in row) + "]" for row in rows) + "]"

        radius = "null" if self.final_radius_m is None else format(self.final_radius_m, ".17g")
        return (
            "{"
            f"\"scene_id\": {json.dumps(scene_id)}, "
            f"\"variant\": {json.dumps(variant)}, "
            f"\"roi_present\": {json.dumps(self.roi is not None)}, "
            f"\"roi\": {matrix(self.roi)}, "
            f"\"scene_tokens\": {matrix(self.scene)}, "
            f"\"final_radius_m\": {radius}"
            "}"
        )
