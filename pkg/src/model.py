"""
Toy causal decoder with LoRA adapters, the prefix-LM and contrastive objectives, decoding,
and the SceneLanguageModel bundle tying sparsifier, projection and decoder into one module.
"""
import logging
import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from .config import (
    ATTENTION_HEADS, FEATURE_DIM, LAYER_NORM_EPS, LM_DIM, LM_HEADS, LM_LAYERS, LM_MAX_SEQ_LEN,
    LORA_ALPHA, LORA_RANK, MAX_OUTPUT_LENGTH, MIN_OUTPUT_LENGTH, NUM_BEAMS, REPETITION_PENALTY,
    ROI_RADIUS_M, TAU, TOP_P,
)
from .errors import DataError, DimensionError, GVLMError, VocabularyError
from .numerics import DTYPE, as_tensor, softmax_rows, xavier_
from .sparsifier import (
    SceneContext, SparseSceneTokens, SparsifierStack, TaskPrompt, embed_task, fourier_encode,
    location_guided_sparsify, make_queries, project, project_and_assemble, task_guided_sparsify,
)
from .vocab import TaskTokenizer

# Configure logging
logger = logging.getLogger(__name__)


class ModelDims(BaseModel):
    """Widths of the sparsifier and the toy decoder; ``vocab`` defaults to the shipped tokenizer."""
    model_config = ConfigDict(extra="forbid")

    d_f: int = Field(default=FEATURE_DIM, ge=2)
    d_lm: int = Field(default=LM_DIM, ge=1)
    heads: int = Field(default=LM_HEADS, ge=1)
    layers: int = Field(default=LM_LAYERS, ge=1)
    vocab: Optional[int] = Field(default=None, ge=2)
    max_seq_len: int = Field(default=LM_MAX_SEQ_LEN, ge=2)

    @model_validator(mode="after")
    def check_widths(self):
        if self.d_f % 2 or self.d_f % ATTENTION_HEADS:
            raise ValueError(f"d_f must be even and divisible by {ATTENTION_HEADS}, got {self.d_f}")
        if self.d_lm % self.heads:
            raise ValueError(f"d_lm {self.d_lm} is not divisible by {self.heads} heads")
        return self

    def vocab_size(self) -> int:
        return self.vocab if self.vocab is not None else len(TaskTokenizer.default())


class ToyDecoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layers: int = Field(default=LM_LAYERS, ge=1)
    d_lm: int = Field(default=LM_DIM, ge=1)
    heads: int = Field(default=LM_HEADS, ge=1)
    vocab_size: int = Field(ge=2)
    max_seq_len: int = Field(default=LM_MAX_SEQ_LEN, ge=2)
    lora_rank: int = Field(default=LORA_RANK, ge=1)
    lora_alpha: float = Field(default=LORA_ALPHA, gt=0)

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_lm % self.heads:
            raise ValueError(f"d_lm {self.d_lm} is not divisible by {self.heads} heads")
        return self


class GenerationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beams: int = Field(default=NUM_BEAMS, ge=1)
    top_p: float = Field(default=TOP_P, gt=0, le=1)
    repetition_penalty: float = Field(default=REPETITION_PENALTY, ge=1)
    max_length: int = Field(default=MAX_OUTPUT_LENGTH, ge=1)
    min_length: int = Field(default=MIN_OUTPUT_LENGTH, ge=0)


# Low-rank adaptation

def lora_apply(weight: torch.Tensor, lora_a: torch.Tensor, lora_b: torch.Tensor, alpha: float) -> torch.Tensor:
    """Effective weight W + (alpha / r) * A @ B; ``weight`` itself is left untouched."""
    rank = lora_a.shape[1]
    if lora_b.shape[0] != rank:
        raise DimensionError(f"rank mismatch: A has rank {rank}, B has {lora_b.shape[0]} rows")
    if weight.shape != (lora_a.shape[0], lora_b.shape[1]):
        raise DimensionError(
            f"adapter {lora_a.shape[0]}x{lora_b.shape[1]} does not fit weight {tuple(weight.shape)}"
        )
    return weight + (alpha / rank) * (lora_a @ lora_b)


class LoraLinear(nn.Module):
    """Row-vector linear map x @ W with an additive low-rank adapter (B starts at zero)."""

    def __init__(self, d_in: int, d_out: int, rank: int = LORA_RANK, alpha: float = LORA_ALPHA,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise DimensionError(f"LoRA rank must be at least 1, got {rank}")
        generator = generator or torch.Generator().manual_seed(0)
        self.alpha = alpha
        self.enabled = True
        self.weight = nn.Parameter(xavier_(torch.empty(d_in, d_out, dtype=DTYPE), generator))
        self.lora_a = nn.Parameter(torch.randn(d_in, rank, generator=generator, dtype=DTYPE) / math.sqrt(d_in))
        self.lora_b = nn.Parameter(torch.zeros(rank, d_out, dtype=DTYPE))

    def effective_weight(self) -> torch.Tensor:
        if not self.enabled:
            return self.weight
        return lora_apply(self.weight, self.lora_a, self.lora_b, self.alpha)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.effective_weight()


# Toy decoder

class DecoderLayer(nn.Module):
    def __init__(self, config: ToyDecoderConfig, generator: torch.Generator):
        super().__init__()
        d = config.d_lm
        self.heads = config.heads
        self.ln1_g = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.wq, self.wk, self.wv, self.wo = (
            LoraLinear(d, d, config.lora_rank, config.lora_alpha, generator) for _ in range(4)
        )
        self.ln2_g = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.w1 = nn.Parameter(xavier_(torch.empty(d, 4 * d, dtype=DTYPE), generator))
        self.b1 = nn.Parameter(torch.zeros(4 * d, dtype=DTYPE))
        self.w2 = nn.Parameter(xavier_(torch.empty(4 * d, d, dtype=DTYPE), generator))
        self.b2 = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        length, d = x.shape
        head_dim = d // self.heads
        h = F.layer_norm(x, (d,), self.ln1_g, self.ln1_b, LAYER_NORM_EPS)
        q = self.wq(h).view(length, self.heads, head_dim).transpose(0, 1)
        k = self.wk(h).view(length, self.heads, head_dim).transpose(0, 1)
        v = self.wv(h).view(length, self.heads, head_dim).transpose(0, 1)
        future = torch.ones(length, length, dtype=torch.bool).triu(1)
        scores = (q @ k.transpose(1, 2) / math.sqrt(head_dim)).masked_fill(future, float("-inf"))
        attended = (softmax_rows(scores) @ v).transpose(0, 1).reshape(length, d)
        x = x + self.wo(attended)
        h = F.layer_norm(x, (d,), self.ln2_g, self.ln2_b, LAYER_NORM_EPS)
        return x + F.gelu(h @ self.w1 + self.b1, approximate="tanh") @ self.w2 + self.b2


class ToyDecoder(nn.Module):
    """Pre-LN causal transformer over a sequence of input embeddings."""

    def __init__(self, config: ToyDecoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(seed)
        d = config.d_lm
        self.tok_emb = nn.Parameter(torch.randn(config.vocab_size, d, generator=generator, dtype=DTYPE) / math.sqrt(d))
        self.pos_emb = nn.Parameter(torch.randn(config.max_seq_len, d, generator=generator, dtype=DTYPE) / math.sqrt(d))
        self.layers = nn.ModuleList([DecoderLayer(config, generator) for _ in range(config.layers)])
        self.lnf_g = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.lnf_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.head = nn.Parameter(xavier_(torch.empty(d, config.vocab_size, dtype=DTYPE), generator))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def set_lora(self, enabled: bool):
        for module in self.modules():
            if isinstance(module, LoraLinear):
                module.enabled = enabled

    def check_ids(self, ids: Sequence[int]) -> List[int]:
        ids = list(ids)
        bad = [i for i in ids if not 0 <= i < self.vocab_size]
        if bad:
            raise VocabularyError(f"token ids {bad[:5]} outside vocabulary of {self.vocab_size}")
        return ids

    def embed(self, ids: Sequence[int]) -> torch.Tensor:
        ids = self.check_ids(ids)
        return self.tok_emb[torch.as_tensor(ids, dtype=torch.long)]

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        length = inputs.shape[0]
        if length > self.config.max_seq_len:
            raise DimensionError(f"sequence of {length} exceeds the decoder context of {self.config.max_seq_len}")
        if inputs.shape[1] != self.config.d_lm:
            raise DimensionError(f"input width {inputs.shape[1]} does not match decoder width {self.config.d_lm}")
        x = inputs + self.pos_emb[:length]
        for layer in self.layers:
            x = layer(x)
        return F.layer_norm(x, (self.config.d_lm,), self.lnf_g, self.lnf_b, LAYER_NORM_EPS) @ self.head


def decoder_forward(decoder: ToyDecoder, prefix: torch.Tensor, gt_ids: Sequence[int]) -> torch.Tensor:
    """Teacher-forced logits (|gt| x V): row t predicts gt[t] from the prefix and gt[:t]."""
    gt_ids = decoder.check_ids(gt_ids)
    if not gt_ids:
        raise DataError("ground-truth sequence is empty")
    if prefix.dim() != 2 or prefix.shape[0] < 1:
        raise DimensionError("prefix must hold at least one embedding row")
    inputs = torch.cat([prefix, decoder.embed(gt_ids[:-1])], dim=0) if len(gt_ids) > 1 else prefix
    logits = decoder(inputs)
    return logits[prefix.shape[0] - 1:]


# Objectives

def prefix_lm_loss(logits: torch.Tensor, gt_ids: Sequence[int], mask: Optional[Sequence[float]] = None) -> torch.Tensor:
    """Sum over ground-truth positions of -log p(gt_t); prefix positions never enter the sum."""
    gt_ids = list(gt_ids)
    if logits.dim() != 2 or logits.shape[0] != len(gt_ids):
        raise DimensionError(f"logits have {logits.shape[0]} rows for {len(gt_ids)} ground-truth tokens")
    vocab = logits.shape[1]
    bad = [i for i in gt_ids if not 0 <= i < vocab]
    if bad:
        raise VocabularyError(f"ground-truth ids {bad[:5]} outside vocabulary of {vocab}")
    nll = F.cross_entropy(logits, torch.as_tensor(gt_ids, dtype=torch.long), reduction="none")
    if mask is not None:
        mask = as_tensor(mask)
        if mask.shape != nll.shape:
            raise DimensionError(f"mask of length {mask.shape[0]} for {nll.shape[0]} positions")
        nll = nll * mask
    return nll.sum()


def contrastive_loss(scene: torch.Tensor, labels: torch.Tensor, match: Sequence[int], tau: float = TAU) -> torch.Tensor:
    """Mean one-sided InfoNCE of each scene row against all label rows, at temperature ``tau``."""
    if labels.shape[0] < 2:
        raise DataError("need negatives: contrastive loss requires at least two labels")
    if scene.shape[0] != len(match):
        raise DimensionError(f"{scene.shape[0]} scene rows for {len(match)} matches")
    if scene.shape[1] != labels.shape[1]:
        raise DimensionError(f"scene width {scene.shape[1]} does not match label width {labels.shape[1]}")
    similarities = F.normalize(scene, dim=1) @ F.normalize(labels, dim=1).T / tau
    return F.cross_entropy(similarities, torch.as_tensor(list(match), dtype=torch.long))


# Full model

class SceneLanguageModel(nn.Module):
    """Sparsifier, projection and toy decoder sharing one parameter namespace."""

    def __init__(self, dims: ModelDims, variant: str = "full", roi_radius_m: float = ROI_RADIUS_M, seed: int = 0):
        super().__init__()
        self.dims = dims
        vocab_size = dims.vocab_size()
        self.sparsifier = SparsifierStack(dims.d_f, dims.d_lm, vocab_size, variant,
                                          roi_radius_m=roi_radius_m, seed=seed)
        self.decoder = ToyDecoder(
            ToyDecoderConfig(layers=dims.layers, d_lm=dims.d_lm, heads=dims.heads,
                             vocab_size=vocab_size, max_seq_len=dims.max_seq_len),
            seed=seed + 1,
        )
        logger.info(f"Built {variant} model: d_f={dims.d_f}, d_lm={dims.d_lm}, vocab={vocab_size}, "
                    f"{sum(p.numel() for p in self.parameters())} parameters")

    @property
    def variant(self) -> str:
        return self.sparsifier.variant

    @property
    def max_seq_len(self) -> int:
        return self.decoder.config.max_seq_len

    def frozen_names(self, stage: str) -> List[str]:
        """Parameters held fixed in a training stage: the text embeddings and the base decoder always."""
        frozen = ["sparsifier.task_embedding"]
        frozen += [name for name, _ in self.decoder.named_parameters(prefix="decoder") if "lora_" not in name]
        if stage == "pretrain":
            frozen += [name for name, _ in self.decoder.named_parameters(prefix="decoder") if "lora_" in name]
            frozen += [name for name, _ in self.sparsifier.named_parameters(prefix="sparsifier")
                       if name.startswith(("sparsifier.proj_", "sparsifier.roi_"))]
        else:
            frozen += ["sparsifier.align_w", "sparsifier.align_bg"]
        return frozen

    def sparsify(self, context: SceneContext, prompt: TaskPrompt):
        """Task-guided scene tokens and, for located prompts, ROI tokens with their radius (sparsifier width)."""
        queries = make_queries(embed_task(prompt, self.sparsifier), self.sparsifier)
        scene_tokens = task_guided_sparsify(context.levels, queries, self.sparsifier, prompt.location)
        roi, radius = None, None
        if prompt.location is not None:
            roi, radius = location_guided_sparsify(context.scene, context.grid, prompt.location, self.sparsifier)
        return scene_tokens, roi, radius

    def encode(self, context: SceneContext, prompt: TaskPrompt) -> SparseSceneTokens:
        """Scene tokens (and ROI tokens for located prompts) projected into the decoder width."""
        scene_tokens, roi, radius = self.sparsify(context, prompt)
        return SparseSceneTokens(
            scene=project(scene_tokens, self.sparsifier),
            roi=None if roi is None else project(roi, self.sparsifier),
            final_radius_m=radius,
        )

    def prefix(self, context: SceneContext, prompt: TaskPrompt, **drop_flags) -> torch.Tensor:
        """Decoder input prefix [ROI] ++ [scene] ++ [prompt] for one scene and prompt."""
        scene_tokens, roi, _ = self.sparsify(context, prompt)
        return project_and_assemble(roi, scene_tokens, self.decoder.embed(prompt.token_ids),
                                    self.sparsifier, **drop_flags)

    def pooled_scene_token(self, context: SceneContext, location) -> torch.Tensor:
        """Mean of the scene tokens when only the encoded location drives the queries."""
        task = fourier_encode(location, self.sparsifier.encoder)[None]
        queries = make_queries(task, self.sparsifier)
        return task_guided_sparsify(context.levels, queries, self.sparsifier, location).mean(dim=0)

    def label_space_token(self, context: SceneContext, location) -> torch.Tensor:
        """Pooled token mapped into label space, plus a trailing background coordinate no label uses."""
        pooled = self.pooled_scene_token(context, location)
        return torch.cat([pooled @ self.sparsifier.align_w, self.sparsifier.align_bg])

    def next_token_logits(self, prefix: torch.Tensor, ids: Sequence[int]) -> torch.Tensor:
        inputs = torch.cat([prefix, self.decoder.embed(ids)], dim=0) if ids else prefix
        return self.decoder(inputs)[-1]


# Decoding

def apply_repetition_penalty(logits: torch.Tensor, emitted: Sequence[int], penalty: float) -> torch.Tensor:
    """Divide positive and multiply negative logits of already emitted tokens by ``penalty``."""
    logits = logits.clone()
    for token in sorted(set(emitted)):
        value = logits[token]
        logits[token] = value / penalty if value > 0 else value * penalty
    return logits


def top_p_filter(log_probs: torch.Tensor, top_p: float) -> torch.Tensor:
    """Keep the smallest most-probable set reaching ``top_p`` mass; everything else goes to -inf."""
    if top_p >= 1.0:
        return log_probs
    order = torch.argsort(log_probs, descending=True, stable=True)
    cumulative = torch.cumsum(torch.exp(log_probs[order]), dim=0)
    # A token survives while the mass before it is still below top_p
    keep = torch.cat([torch.ones(1, dtype=torch.bool), cumulative[:-1] < top_p])
    filtered = torch.full_like(log_probs, float("-inf"))
    filtered[order[keep]] = log_probs[order[keep]]
    return filtered


def _next_log_probs(model, prefix: torch.Tensor, ids: List[int], config: GenerationConfig, eos_id: int) -> torch.Tensor:
    logits = apply_repetition_penalty(model.next_token_logits(prefix, ids), ids, config.repetition_penalty)
    if len(ids) < config.min_length:
        logits[eos_id] = float("-inf")
    return top_p_filter(F.log_softmax(logits, dim=-1), config.top_p)


def _length_budget(model, prefix: torch.Tensor, config: GenerationConfig) -> int:
    if config.max_length < config.min_length:
        raise GVLMError(f"max_length {config.max_length} is below min_length {config.min_length}")
    context = getattr(model, "max_seq_len", None)
    if context is None:
        return config.max_length
    budget = context - prefix.shape[0] + 1
    if budget < 1:
        raise DimensionError(f"prefix of {prefix.shape[0]} rows leaves no room in a context of {context}")
    if budget < config.max_length:
        logger.warning(f"Generation capped at {budget} tokens by the decoder context of {context}")
    return min(budget, config.max_length)


def greedy_decode(model, prefix: torch.Tensor, config: GenerationConfig, eos_id: int) -> List[int]:
    """Arg-max decoding under the same penalty and min-length rules as beam search."""
    max_length = _length_budget(model, prefix, config)
    ids: List[int] = []
    with torch.no_grad():
        for _ in range(max_length):
            token = int(torch.argmax(_next_log_probs(model, prefix, ids, config, eos_id)))
            if token == eos_id:
                break
            ids.append(token)
    return ids


def generate(model, prefix: torch.Tensor, config: GenerationConfig, eos_id: int) -> List[int]:
    """Beam search with length-normalized scores; one beam is exactly greedy decoding.

    ``model`` only needs ``next_token_logits(prefix, ids)`` and optionally ``max_seq_len``.
    """
    max_length = _length_budget(model, prefix, config)
    if config.beams == 1:
        return greedy_decode(model, prefix, config, eos_id)

    # (ids, summed log-probability, scored length)
    alive: List[Tuple[List[int], float, int]] = [([], 0.0, 0)]
    finished: List[Tuple[List[int], float, int]] = []
    with torch.no_grad():
        for _ in range(max_length):
            candidates = []
            for ids, score, _ in alive:
                log_probs = _next_log_probs(model, prefix, ids, config, eos_id)
                allowed = int(torch.isfinite(log_probs).sum())
                values, tokens = torch.topk(log_probs, min(config.beams, allowed))
                candidates += [(ids + [int(t)], score + float(v)) for v, t in zip(values, tokens)]
            candidates.sort(key=lambda c: (-c[1], c[0]))

            alive = []
            for ids, score in candidates:
                if len(alive) == config.beams:
                    break
                if ids[-1] == eos_id:
                    finished.append((ids[:-1], score, len(ids)))
                else:
                    alive.append((ids, score, len(ids)))
            if not alive or len(finished) >= config.beams:
                break

    best = max(finished + alive, key=lambda c: c[1] / max(1, c[2]))
    return best[0]
