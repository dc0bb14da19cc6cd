import math

import numpy as np
import pytest
import torch

from src.config import DOWNSAMPLE_TARGET, LAYER_NORM_EPS, ROI_TOKENS, SCENE_TOKENS
from src.errors import DataError, DimensionError, GVLMError, VocabularyError
from src.model import (
    GenerationConfig, LoraLinear, ModelDims, SceneLanguageModel, ToyDecoder, ToyDecoderConfig, apply_repetition_penalty,
    contrastive_loss, decoder_forward, generate, greedy_decode, lora_apply, prefix_lm_loss, top_p_filter,
)
from src.numerics import DTYPE, ParamStore, grad_check
from src.sparsifier import Box, Point, SceneContext, TaskPrompt
from src.synth import random_scene_spec, synth_scene
from src.trainer import contrastive_batch_loss, contrastive_samples


def tiny_decoder(layers=1, d=4, heads=1, vocab=5, max_seq_len=8, seed=0) -> ToyDecoder:
    return ToyDecoder(ToyDecoderConfig(layers=layers, d_lm=d, heads=heads, vocab_size=vocab,
                                       max_seq_len=max_seq_len, lora_rank=2), seed=seed)


class ForcedLogits:
    """Stub model whose logits depend only on how many tokens were emitted."""

    def __init__(self, schedule, vocab=10, max_seq_len=None):
        self.schedule = schedule
        self.vocab = vocab
        if max_seq_len is not None:
            self.max_seq_len = max_seq_len

    def next_token_logits(self, prefix, ids):
        favored = self.schedule[min(len(ids), len(self.schedule) - 1)]
        logits = torch.zeros(self.vocab, dtype=DTYPE)
        logits[favored] = 10.0
        return logits


def numpy_decoder_oracle(decoder: ToyDecoder, inputs: np.ndarray) -> np.ndarray:
    """Single-head, single-layer forward written with explicit loops."""
    p = {name: value.detach().numpy() for name, value in decoder.named_parameters()}
    layer = decoder.layers[0]
    alpha, rank = layer.wq.alpha, p["layers.0.wq.lora_a"].shape[1]

    def weight(name):
        return p[f"layers.0.{name}.weight"] + (alpha / rank) * p[f"layers.0.{name}.lora_a"] @ p[f"layers.0.{name}.lora_b"]

    def layer_norm(x, g, b):
        mean = x.mean()
        var = ((x - mean) ** 2).mean()
        return (x - mean) / math.sqrt(var + LAYER_NORM_EPS) * g + b

    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))

    length, d = inputs.shape
    x = inputs + p["pos_emb"][:length]
    h = np.array([layer_norm(x[t], p["layers.0.ln1_g"], p["layers.0.ln1_b"]) for t in range(length)])
    q, k, v = h @ weight("wq"), h @ weight("wk"), h @ weight("wv")
    out = np.zeros_like(x)
    for t in range(length):
        scores = np.array([q[t] @ k[j] / math.sqrt(d) for j in range(t + 1)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        attended = sum(w[j] * v[j] for j in range(t + 1))
        out[t] = x[t] + attended @ weight("wo")
    logits = []
    for t in range(length):
        hidden = layer_norm(out[t], p["layers.0.ln2_g"], p["layers.0.ln2_b"])
        y = out[t] + gelu(hidden @ p["layers.0.w1"] + p["layers.0.b1"]) @ p["layers.0.w2"] + p["layers.0.b2"]
        logits.append(layer_norm(y, p["lnf_g"], p["lnf_b"]) @ p["head"])
    return np.array(logits)


# Decoder

def test_decoder_matches_loop_oracle():
    decoder = tiny_decoder()
    generator = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for module in decoder.modules():
            if isinstance(module, LoraLinear):
                module.lora_b.copy_(torch.randn(module.lora_b.shape, generator=generator, dtype=DTYPE))
    inputs = torch.randn(2, 4, generator=generator, dtype=DTYPE)
    expected = numpy_decoder_oracle(decoder, inputs.numpy())
    assert np.max(np.abs(decoder(inputs).detach().numpy() - expected)) <= 1e-9


def test_decoder_is_causal():
    decoder = tiny_decoder(layers=2, d=8, heads=2)
    prefix = torch.randn(3, 8, dtype=DTYPE)
    a = decoder_forward(decoder, prefix, [1, 2, 3])
    b = decoder_forward(decoder, prefix, [1, 4, 3])
    assert a.shape == (3, 5)
    assert torch.equal(a[:2], b[:2])
    assert not torch.equal(a[2], b[2])


def test_decoder_rejects_overlong_and_bad_input():
    decoder = tiny_decoder(max_seq_len=4)
    with pytest.raises(DimensionError):
        decoder(torch.zeros(5, 4, dtype=DTYPE))
    with pytest.raises(DimensionError):
        decoder(torch.zeros(2, 3, dtype=DTYPE))
    with pytest.raises(VocabularyError):
        decoder_forward(decoder, torch.zeros(1, 4, dtype=DTYPE), [9])
    with pytest.raises(DataError):
        decoder_forward(decoder, torch.zeros(1, 4, dtype=DTYPE), [])


def test_zero_adapters_leave_outputs_bit_identical():
    decoder = tiny_decoder(layers=2, d=8, heads=2)
    inputs = torch.randn(4, 8, dtype=DTYPE)
    adapted = decoder(inputs)
    decoder.set_lora(False)
    assert torch.equal(adapted, decoder(inputs))


# Objectives

def test_prefix_lm_loss_examples():
    assert float(prefix_lm_loss(torch.zeros(3, 4, dtype=DTYPE), [0, 1, 2])) == pytest.approx(3 * math.log(4), abs=1e-12)

    logits = torch.tensor([[0.0, math.log(3)], [math.log(3), 0.0]], dtype=DTYPE)
    assert float(prefix_lm_loss(logits, [1, 1])) == pytest.approx(-math.log(0.75) - math.log(0.25), abs=1e-12)
    assert float(prefix_lm_loss(logits, [1, 1])) == pytest.approx(1.6740, abs=1e-4)

    saturated = torch.zeros(2, 5, dtype=DTYPE)
    saturated[0, 3] = saturated[1, 1] = 1e4
    assert float(prefix_lm_loss(saturated, [3, 1])) <= 1e-6


def test_prefix_lm_loss_masking_and_errors():
    logits = torch.tensor([[0.0, math.log(3)], [math.log(3), 0.0]], dtype=DTYPE)
    assert float(prefix_lm_loss(logits, [1, 1], mask=[1.0, 0.0])) == pytest.approx(-math.log(0.75), abs=1e-12)
    with pytest.raises(VocabularyError):
        prefix_lm_loss(logits, [1, 2])
    with pytest.raises(DimensionError):
        prefix_lm_loss(logits, [1])


def test_contrastive_loss_examples():
    labels = torch.eye(3, dtype=DTYPE)
    equal = contrastive_loss(torch.ones(2, 3, dtype=DTYPE), labels, [0, 2])
    assert float(equal) == pytest.approx(math.log(3), abs=1e-12)

    orthonormal = torch.eye(2, dtype=DTYPE)
    tight = contrastive_loss(orthonormal[:1], orthonormal, [0])
    assert float(tight) == pytest.approx(math.log1p(math.exp(-1 / 0.07)), rel=1e-9)
    assert float(tight) == pytest.approx(6.2e-7, rel=0.05)


def test_contrastive_loss_decreases_with_the_matching_similarity():
    labels = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=DTYPE)
    weak = contrastive_loss(torch.tensor([[0.2, 0.0, 1.0]], dtype=DTYPE), labels, [0])
    strong = contrastive_loss(torch.tensor([[0.6, 0.0, 0.8]], dtype=DTYPE), labels, [0])
    assert 0.0 <= float(strong) < float(weak)


def test_contrastive_loss_needs_negatives():
    with pytest.raises(DataError, match="need negatives"):
        contrastive_loss(torch.ones(1, 3, dtype=DTYPE), torch.ones(1, 3, dtype=DTYPE), [0])


# Low-rank adaptation

def test_lora_zero_b_is_identity():
    weight = torch.randn(3, 4, dtype=DTYPE)
    before = weight.clone()
    effective = lora_apply(weight, torch.randn(3, 2, dtype=DTYPE), torch.zeros(2, 4, dtype=DTYPE), 16.0)
    assert torch.equal(effective, weight)
    assert torch.equal(weight, before)


def test_lora_full_rank_recovers_delta():
    weight = torch.randn(3, 3, dtype=DTYPE)
    delta = torch.randn(3, 3, dtype=DTYPE)
    effective = lora_apply(weight, torch.eye(3, dtype=DTYPE), delta, alpha=3.0)
    assert torch.allclose(effective, weight + delta, atol=1e-15)


def test_lora_matches_dense_recomputation():
    rng = np.random.default_rng(0)
    w, a, b = rng.standard_normal((5, 6)), rng.standard_normal((5, 2)), rng.standard_normal((2, 6))
    effective = lora_apply(torch.tensor(w), torch.tensor(a), torch.tensor(b), alpha=16.0).numpy()
    dense = np.array([[w[i, j] + 8.0 * sum(a[i, k] * b[k, j] for k in range(2)) for j in range(6)] for i in range(5)])
    assert np.max(np.abs(effective - dense)) <= 1e-12


def test_lora_rank_mismatch():
    with pytest.raises(DimensionError):
        lora_apply(torch.zeros(3, 3, dtype=DTYPE), torch.zeros(3, 2, dtype=DTYPE), torch.zeros(3, 3, dtype=DTYPE), 1.0)


# Decoding

def test_forced_logits_greedy_emits_token_until_max_length():
    config = GenerationConfig(beams=1, max_length=5, repetition_penalty=1.0, top_p=1.0)
    assert greedy_decode(ForcedLogits([7]), torch.zeros(1, 4, dtype=DTYPE), config, eos_id=2) == [7] * 5


def test_one_beam_is_greedy(tiny_model, desk_context):
    prefix = tiny_model.prefix(desk_context, TaskPrompt((5, 6, 7)))
    config = GenerationConfig(beams=1, max_length=6)
    eos_id = 2
    assert generate(tiny_model, prefix, config, eos_id) == greedy_decode(tiny_model, prefix, config, eos_id)


def test_beam_search_picks_the_best_normalized_hypothesis():
    model = ForcedLogits([3, 2])
    config = GenerationConfig(beams=2, max_length=4, repetition_penalty=1.0, top_p=1.0)
    assert generate(model, torch.zeros(1, 4, dtype=DTYPE), config, eos_id=2) == [3]


def test_min_length_blocks_early_end_token():
    model = ForcedLogits([2])
    config = GenerationConfig(beams=1, max_length=3, min_length=2, repetition_penalty=1.0, top_p=1.0)
    ids = greedy_decode(model, torch.zeros(1, 4, dtype=DTYPE), config, eos_id=2)
    assert len(ids) == 2 and 2 not in ids


def test_generation_is_capped_by_the_decoder_context():
    model = ForcedLogits([7], max_seq_len=10)
    config = GenerationConfig(beams=1, max_length=50, repetition_penalty=1.0, top_p=1.0)
    assert len(greedy_decode(model, torch.zeros(8, 4, dtype=DTYPE), config, eos_id=2)) == 3


def test_max_length_below_min_length():
    config = GenerationConfig(max_length=1, min_length=3)
    with pytest.raises(GVLMError):
        generate(ForcedLogits([7]), torch.zeros(1, 4, dtype=DTYPE), config, eos_id=2)


def test_repetition_penalty_rescoring():
    logits = torch.tensor([0.5, 2.0, -1.0], dtype=DTYPE)
    rescored = apply_repetition_penalty(logits, [1, 2, 1], 3.0)
    assert rescored.tolist() == [0.5, 2.0 / 3.0, -3.0]
    assert logits.tolist() == [0.5, 2.0, -1.0]


def test_top_p_keeps_the_smallest_sufficient_set():
    log_probs = torch.log(torch.tensor([0.2, 0.5, 0.3], dtype=DTYPE))
    kept = top_p_filter(log_probs, 0.7)
    assert torch.isfinite(kept).tolist() == [False, True, True]
    assert torch.isfinite(top_p_filter(log_probs, 0.4)).tolist() == [False, True, False]
    assert torch.equal(top_p_filter(log_probs, 1.0), log_probs)


# Full pipeline

def test_full_pipeline_gradients(desk_scene):
    model = SceneLanguageModel(ModelDims(d_f=16, d_lm=16, heads=2, layers=1, vocab=11), "full", seed=0)
    context = SceneContext.build(desk_scene, "full", n_sample=64, seed=0)
    prompt = TaskPrompt((3, 5, 7), Point(1.0, 1.0, 0.5))
    store = ParamStore(model, frozen=model.frozen_names("instruct"))

    def loss():
        logits = decoder_forward(model.decoder, model.prefix(context, prompt), [4, 6, 2])
        return prefix_lm_loss(logits, [4, 6, 2])

    assert grad_check(loss, store, max_entries=3) <= 1e-4


def test_contrastive_pretraining_gradients(desk_scene, bank):
    model = SceneLanguageModel(ModelDims(d_f=16, d_lm=16, heads=2, layers=1, vocab=11), "full", seed=0)
    context = SceneContext.build(desk_scene, "full", n_sample=64, seed=0)
    samples = contrastive_samples([context])
    with torch.no_grad():
        model.sparsifier.align_w.copy_(torch.randn(16, 16, dtype=DTYPE, generator=torch.Generator().manual_seed(0)))
    store = ParamStore(model, frozen=model.frozen_names("pretrain"))

    assert grad_check(lambda: contrastive_batch_loss(model, samples, bank), store, max_entries=3) <= 1e-4


def test_token_budgets_hold_on_random_scenes(tokenizer, bank):
    model = SceneLanguageModel(ModelDims(d_f=16, d_lm=16, heads=2, layers=1), "full", seed=0)
    rng = np.random.default_rng(5)
    violations = []
    for i in range(40):
        spec = random_scene_spec(f"b{i:02d}", tokenizer.labels[:20], seed=i, feature_dim=16)
        context = SceneContext.build(synth_scene(spec, bank), "full", n_sample=int(rng.integers(32, 1500)), seed=i)
        if any(len(level) > DOWNSAMPLE_TARGET for level in context.levels):
            violations.append((i, "levels"))
        for _ in range(5):
            corner = rng.uniform(0.0, 3.0, size=3)
            location = [None, Point(*corner), Box(tuple(corner), tuple(corner + 1.0))][int(rng.integers(3))]
            tokens = model.encode(context, TaskPrompt.from_text("how many chairs?", tokenizer, location))
            if tokens.scene.shape != (SCENE_TOKENS, 16):
                violations.append((i, "scene"))
            roi_rows = 0 if tokens.roi is None else tokens.roi.shape[0]
            if roi_rows != (0 if location is None else ROI_TOKENS):
                violations.append((i, "roi"))
    assert violations == []


def test_frozen_names_per_stage(tiny_model):
    instruct = set(tiny_model.frozen_names("instruct"))
    pretrain = set(tiny_model.frozen_names("pretrain"))
    assert "sparsifier.task_embedding" in instruct
    assert "decoder.tok_emb" in instruct
    assert not any("lora_" in name for name in instruct)
    assert "decoder.layers.0.wq.lora_a" in pretrain
    assert "sparsifier.proj_w" in pretrain and "sparsifier.proj_w" not in instruct
    assert "sparsifier.scene_seeds" not in pretrain
    assert "sparsifier.align_w" in instruct and "sparsifier.align_w" not in pretrain
