"""
Dense float64 kernels, attention blocks, parameter storage and optimization primitives.

All learnable modules are torch ``nn.Module``s in float64; reverse-mode gradients come
from ``torch.autograd`` and are verified against central finite differences by
``grad_check``. The ``ParamStore`` wraps a module, owns its AdamW moments and
serializes everything to the GVLP checkpoint format.
"""
import io
import logging
import math
import struct
import zlib
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import (
    ADAM_BETAS, ADAM_EPS, ATTENTION_HEADS, CKPT_MAGIC, CKPT_VERSION,
    LAYER_NORM_EPS, LR_MAX, LR_MIN,
)
from .errors import (
    BadMagicError, ChecksumError, CheckpointFormatError, DimensionError,
    GVLMError, NumericError, TruncatedPayloadError, VersionMismatchError,
)

# Configure logging
logger = logging.getLogger(__name__)

DTYPE = torch.float64


def as_tensor(values, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """Convert arrays or nested lists to a float64 tensor without copying tensors that already fit."""
    if isinstance(values, torch.Tensor):
        return values.to(dtype)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=dtype)


def ensure_finite(tensor: torch.Tensor, what: str, diagnostics: Optional[Dict] = None) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values in {what}", diagnostics)
    return tensor


def softmax_rows(a: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if a.numel() == 0:
        raise GVLMError("empty input")
    shifted = a - a.max(dim=-1, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def xavier_(tensor: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    with torch.no_grad():
        return nn.init.xavier_uniform_(tensor, generator=generator)


class AttentionBlock(nn.Module):
    """Weights of one multi-head cross-attention block (attention + 4x GELU feed-forward).

    With ``feed_forward=False`` only the four attention projections exist, as used by attention pooling.
    """

    def __init__(self, dim: int, heads: int = ATTENTION_HEADS, generator: Optional[torch.Generator] = None,
                 feed_forward: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise DimensionError(f"width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.feed_forward = feed_forward
        generator = generator or torch.Generator().manual_seed(0)

        def weight(rows: int, cols: int) -> nn.Parameter:
            return nn.Parameter(xavier_(torch.empty(rows, cols, dtype=DTYPE), generator))

        self.wq = weight(dim, dim)
        self.wk = weight(dim, dim)
        self.wv = weight(dim, dim)
        self.wo = weight(dim, dim)
        if not feed_forward:
            return
        self.w1 = weight(dim, 4 * dim)
        self.b1 = nn.Parameter(torch.zeros(4 * dim, dtype=DTYPE))
        self.w2 = weight(4 * dim, dim)
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.ln1_g = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.ln2_g = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))


def multi_head_attention(queries: torch.Tensor, kv: torch.Tensor, block: AttentionBlock,
                         bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Scaled dot-product attention of ``queries`` over ``kv`` split across the block's heads.

    ``bias`` holds one additive logit per key, shared by every head and query.
    """
    if queries.dim() != 2 or kv.dim() != 2:
        raise DimensionError("attention inputs must be 2-D")
    if queries.shape[1] != block.dim or kv.shape[1] != block.dim:
        raise DimensionError(
            f"feature width mismatch: queries {queries.shape[1]}, kv {kv.shape[1]}, block {block.dim}"
        )
    n_q, n_kv = queries.shape[0], kv.shape[0]
    if bias is not None and bias.shape != (n_kv,):
        raise DimensionError(f"attention bias of shape {tuple(bias.shape)} for {n_kv} keys")
    head_dim = block.dim // block.heads

    q = (queries @ block.wq).view(n_q, block.heads, head_dim).transpose(0, 1)
    k = (kv @ block.wk).view(n_kv, block.heads, head_dim).transpose(0, 1)
    v = (kv @ block.wv).view(n_kv, block.heads, head_dim).transpose(0, 1)

    logits = q @ k.transpose(1, 2) / math.sqrt(head_dim)
    if bias is not None:
        logits = logits + bias
    weights = softmax_rows(logits)
    heads_out = (weights @ v).transpose(0, 1).reshape(n_q, block.dim)
    return heads_out @ block.wo


def cross_attention_block(queries: torch.Tensor, kv: torch.Tensor, block: AttentionBlock,
                          bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross-attention + residual + layer-norm, then GELU feed-forward + residual + layer-norm."""
    if queries.shape[0] < 1 or kv.shape[0] < 1:
        raise DimensionError("cross-attention needs at least one query and one key")
    if not block.feed_forward:
        raise DimensionError("cross-attention block is missing its feed-forward weights")
    x = F.layer_norm(queries + multi_head_attention(queries, kv, block, bias), (block.dim,),
                     block.ln1_g, block.ln1_b, LAYER_NORM_EPS)
    hidden = F.gelu(x @ block.w1 + block.b1, approximate="tanh")
    return F.layer_norm(x + hidden @ block.w2 + block.b2, (block.dim,),
                        block.ln2_g, block.ln2_b, LAYER_NORM_EPS)


def attention_pool(seeds: torch.Tensor, tokens: torch.Tensor, block: AttentionBlock) -> torch.Tensor:
    """Pure attention of learnable seed queries over a token set (no feed-forward)."""
    if tokens.dim() != 2 or tokens.shape[0] == 0:
        raise GVLMError("nothing to pool")
    if seeds.shape[0] < 1:
        raise DimensionError("attention pooling needs at least one seed")
    return multi_head_attention(seeds, tokens, block)


def cosine_lr(step: int, total_steps: int, lr_max: float = LR_MAX, lr_min: float = LR_MIN) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at total_steps."""
    if total_steps <= 0:
        raise GVLMError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise GVLMError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class ParamStore:
    """Named parameters of a module together with their gradients and AdamW moments."""

    def __init__(self, module: nn.Module, frozen: Iterable[str] = ()):
        self.module = module
        self.params: "OrderedDict[str, nn.Parameter]" = OrderedDict(module.named_parameters())
        self.step = 0
        self._optimizer: Optional[torch.optim.AdamW] = None
        self.freeze(frozen)

    # Trainable set

    def freeze(self, prefixes: Iterable[str]):
        """Stop gradients for every parameter whose name starts with one of ``prefixes``."""
        prefixes = tuple(prefixes)
        if not prefixes:
            return
        for name, param in self.params.items():
            if name.startswith(prefixes):
                param.requires_grad_(False)
                param.grad = None
        self._rebuild_optimizer()

    def unfreeze(self, prefixes: Iterable[str]):
        prefixes = tuple(prefixes)
        for name, param in self.params.items():
            if name.startswith(prefixes):
                param.requires_grad_(True)
        self._rebuild_optimizer()

    def trainable_items(self) -> List[Tuple[str, nn.Parameter]]:
        return [(name, p) for name, p in self.params.items() if p.requires_grad]

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None

    def grad(self, name: str) -> torch.Tensor:
        param = self.params[name]
        return param.grad.detach() if param.grad is not None else torch.zeros_like(param)

    def grad_norm(self, prefixes: Iterable[str] = ("",)) -> float:
        prefixes = tuple(prefixes)
        total = 0.0
        for name in self.params:
            if name.startswith(prefixes):
                total += float(self.grad(name).pow(2).sum())
        return math.sqrt(total)

    # Optimizer moments

    def _rebuild_optimizer(self):
        """Recreate the AdamW optimizer for the current trainable set, keeping known moments."""
        old_state = self._optimizer.state if self._optimizer is not None else {}
        trainable = [p for _, p in self.trainable_items()]
        if not trainable:
            self._optimizer = None
            return
        self._optimizer = torch.optim.AdamW(
            trainable, lr=LR_MAX, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0, foreach=False
        )
        for param in trainable:
            if param in old_state:
                self._optimizer.state[param] = old_state[param]

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        param = self.params[name]
        state = self._optimizer.state.get(param, {}) if self._optimizer is not None else {}
        if "exp_avg" in state:
            return state["exp_avg"].detach(), state["exp_avg_sq"].detach()
        return torch.zeros_like(param), torch.zeros_like(param)

    def set_moments(self, name: str, first: torch.Tensor, second: torch.Tensor):
        param = self.params[name]
        if not param.requires_grad:
            return
        if self._optimizer is None:
            self._rebuild_optimizer()
        self._optimizer.state[param] = {
            "step": torch.tensor(float(self.step)),
            "exp_avg": first.clone(),
            "exp_avg_sq": second.clone(),
        }

    # Checkpoint

    def to_bytes(self) -> bytes:
        """Serialize params, grads and moments in the GVLP layout with a CRC-32 trailer."""
        buffer = io.BytesIO()
        buffer.write(CKPT_MAGIC)
        buffer.write(struct.pack("<II", CKPT_VERSION, len(self.params)))
        for name, param in self.params.items():
            encoded = name.encode("utf-8")
            rows, cols = _matrix_shape(param)
            buffer.write(struct.pack("<H", len(encoded)))
            buffer.write(encoded)
            buffer.write(struct.pack("<II", rows, cols))
            first, second = self.moments(name)
            for tensor in (param.detach(), self.grad(name), first, second):
                buffer.write(tensor.contiguous().numpy().astype("<f8").tobytes())
        payload = buffer.getvalue()
        return payload + struct.pack("<I", zlib.crc32(payload))

    def load_bytes(self, data: bytes, step: Optional[int] = None):
        """Restore params, grads and moments from GVLP bytes produced for the same module layout."""
        entries = decode_checkpoint(data)
        if step is not None:
            self.step = step
        missing = set(self.params) - set(entries)
        unexpected = set(entries) - set(self.params)
        if missing or unexpected:
            raise CheckpointFormatError(
                f"checkpoint does not match model: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        self._rebuild_optimizer()
        with torch.no_grad():
            for name, (value, grad, first, second) in entries.items():
                param = self.params[name]
                if tuple(value.shape) != _matrix_shape(param):
                    raise CheckpointFormatError(f"shape mismatch for {name}")
                param.copy_(value.view_as(param))
                param.grad = grad.view_as(param).clone() if param.requires_grad else None
                self.set_moments(name, first.view_as(param), second.view_as(param))
        logger.info(f"Loaded {len(entries)} parameter tensors from checkpoint")


def _matrix_shape(param: torch.Tensor) -> Tuple[int, int]:
    if param.dim() == 1:
        return 1, param.shape[0]
    if param.dim() == 2:
        return param.shape[0], param.shape[1]
    raise DimensionError(f"only 1-D and 2-D parameters are supported, got {tuple(param.shape)}")


def decode_checkpoint(data: bytes) -> "OrderedDict[str, Tuple[torch.Tensor, ...]]":
    """Parse GVLP bytes into name -> (param, grad, m, v) matrices."""
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise BadMagicError("not a GVLP checkpoint")
    if len(data) < 16:
        raise TruncatedPayloadError("checkpoint header truncated")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, count = struct.unpack_from("<II", payload, 4)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")

    entries: "OrderedDict[str, Tuple[torch.Tensor, ...]]" = OrderedDict()
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            if offset + name_len > len(payload):
                raise TruncatedPayloadError("checkpoint name truncated")
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            rows, cols = struct.unpack_from("<II", payload, offset)
            offset += 8
            size = rows * cols * 8
            if offset + 4 * size > len(payload):
                raise TruncatedPayloadError(f"checkpoint entry {name!r} truncated")
            tensors = []
            for _ in range(4):
                values = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
                tensors.append(torch.from_numpy(values.astype(np.float64)).view(rows, cols))
                offset += size
            entries[name] = tuple(tensors)
    except (struct.error, UnicodeDecodeError) as e:
        # A corrupted length field can make a valid-looking prefix unparseable
        if zlib.crc32(payload) != crc:
            raise ChecksumError("checkpoint checksum mismatch") from e
        raise TruncatedPayloadError(f"checkpoint truncated: {e}") from e
    if offset != len(payload):
        if zlib.crc32(payload) != crc:
            raise ChecksumError("checkpoint checksum mismatch")
        raise TruncatedPayloadError("trailing bytes after checkpoint entries")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    return entries


def grad_check(scalar_function: Callable[[], torch.Tensor], store: ParamStore,
               eps: float = 1e-5, max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Largest relative error between autograd and central finite differences.

    ``max_entries`` checks a seeded subset of entries per parameter instead of all of them.
    """
    store.zero_grad()
    loss = scalar_function()
    ensure_finite(loss.detach(), "grad_check loss")
    loss.backward()
    analytic = {name: store.grad(name).clone().view(-1) for name, _ in store.trainable_items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, param in store.trainable_items():
            flat = param.view(-1)
            indices = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                indices = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
            for i in indices:
                original = float(flat[i])
                flat[i] = original + eps
                f_plus = float(scalar_function())
                flat[i] = original - eps
                f_minus = float(scalar_function())
                flat[i] = original
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = float(analytic[name][i])
                worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact), abs(numeric)))
    store.zero_grad()
    return worst


def adamw_step(store: ParamStore, lr: float, weight_decay: float,
               betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS) -> ParamStore:
    """One AdamW update of every trainable parameter (decoupled weight decay, bias-corrected moments)."""
    if lr < 0 or weight_decay < 0:
        raise GVLMError(f"lr and weight_decay must be non-negative, got {lr}, {weight_decay}")
    if store._optimizer is None:
        store._rebuild_optimizer()
    if store._optimizer is None:
        raise GVLMError("no trainable parameters")

    for name, param in store.trainable_items():
        if param.grad is None:
            param.grad = torch.zeros_like(param)
        ensure_finite(param.grad, f"gradient of {name}", {"parameter": name, "step": store.step})

    for group in store._optimizer.param_groups:
        group.update(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)
    store._optimizer.step()
    store.step += 1
    return store
