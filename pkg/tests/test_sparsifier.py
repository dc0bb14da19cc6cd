import json
import math

import numpy as np
import pytest
import torch

from src.errors import ConfigError, DataError, DimensionError, VocabularyError
from src.numerics import DTYPE
from src.scene import GaussianScene, TokenLevel
from src.spatial import SpatialGrid, radius_query, roi_members
from src.sparsifier import (
    Box, FourierPositionEncoder, Point, SceneContext, SparseSceneTokens, SparsifierStack, TaskPrompt,
    downsample_knn_variant, downsample_uniform, embed_task, fourier_encode, location_guided_sparsify,
    make_queries, project, project_and_assemble, proximity_bias, reduce_levels, stride_indices, task_guided_sparsify,
)

D_F = 16


@pytest.fixture
def stack(tokenizer):
    return SparsifierStack(D_F, D_F, len(tokenizer), "full", seed=0)


@pytest.fixture
def prompt(tokenizer):
    return TaskPrompt.from_text("How many chairs are in the scene?", tokenizer)


def test_fourier_encoding_with_zero_matrix():
    encoder = FourierPositionEncoder(8)
    with torch.no_grad():
        encoder.B.zero_()
    out = fourier_encode(Point(0.3, -1.2, 5.0), encoder)
    assert out.tolist() == [0.0] * 4 + [1.0] * 4


def test_fourier_encoding_hand_value():
    encoder = FourierPositionEncoder(8)
    with torch.no_grad():
        encoder.B.zero_()
        encoder.B[0, 0] = 1.0
    out = fourier_encode((0.25, 0.0, 0.0), encoder)
    assert torch.allclose(out, torch.tensor([1, 0, 0, 0, 0, 1, 1, 1], dtype=DTYPE), atol=1e-15)


def test_locations_validate_their_coordinates():
    with pytest.raises(DataError):
        Point(float("nan"), 0.0, 0.0)
    with pytest.raises(DataError):
        Box((1.0, 0.0, 0.0), (0.0, 1.0, 1.0))


def test_embed_task_rows(stack, prompt):
    t = len(prompt.token_ids)
    assert embed_task(prompt, stack).shape == (t, D_F)

    located = TaskPrompt(prompt.token_ids, Point(0.5, 0.5, 0.5))
    rows = embed_task(located, stack)
    assert rows.shape == (t + 1, D_F)
    assert torch.equal(rows[-1], fourier_encode(Point(0.5, 0.5, 0.5), stack.encoder))

    boxed = TaskPrompt(prompt.token_ids, Box((0.0, 0.0, 0.0), (2.0, 2.0, 2.0)))
    assert torch.equal(embed_task(boxed, stack)[-1], fourier_encode((1.0, 1.0, 1.0), stack.encoder))


def test_embed_task_rejects_unknown_ids(stack):
    with pytest.raises(VocabularyError):
        embed_task(TaskPrompt((stack.task_embedding.shape[0],)), stack)
    with pytest.raises(DataError):
        TaskPrompt(())


def test_queries_shape_and_single_token_value_path(stack, prompt):
    queries = make_queries(embed_task(prompt, stack), stack)
    assert queries.shape == (128, D_F)

    token = embed_task(TaskPrompt(prompt.token_ids[:1]), stack)
    single = make_queries(token, stack)
    expected = token @ stack.query_pool.wv @ stack.query_pool.wo
    assert torch.allclose(single, expected.expand(128, D_F), atol=1e-12)

    with pytest.raises(DataError):
        make_queries(torch.zeros(0, D_F, dtype=DTYPE), stack)


def test_learnable_queries_ignore_the_prompt(tokenizer):
    stack = SparsifierStack(D_F, D_F, len(tokenizer), "learnable_queries", seed=0)
    a = make_queries(embed_task(TaskPrompt.from_text("how many chairs?", tokenizer), stack), stack)
    b = make_queries(embed_task(TaskPrompt.from_text("describe the room.", tokenizer), stack), stack)
    assert torch.equal(a, b)


def test_unknown_variant(tokenizer):
    with pytest.raises(ConfigError):
        SparsifierStack(D_F, D_F, len(tokenizer), "sparse_everything")


def test_stride_downsampling():
    assert stride_indices(10, 5).tolist() == [0, 2, 4, 6, 8]
    tokens = np.arange(512 * 2, dtype=np.float64).reshape(512, 2)
    assert downsample_uniform(tokens, 512) is tokens
    expected = [math.floor(i * 40000 / 512) for i in range(512)]
    assert stride_indices(40000, 512).tolist() == expected
    tensor = torch.arange(40000, dtype=DTYPE)[:, None]
    assert downsample_uniform(tensor, 512)[:, 0].tolist() == [float(i) for i in expected]


def test_kmeans_reduction_of_two_clusters():
    rng = np.random.default_rng(0)
    positions = np.concatenate([rng.normal(0.0, 0.05, (5, 3)), rng.normal(10.0, 0.05, (5, 3))])
    tokens = np.concatenate([np.full((5, 4), 1.0), np.full((5, 4), -2.0)]) + rng.normal(0, 0.1, (10, 4))
    reduced, centers = downsample_knn_variant(tokens, positions, target=2)
    assert np.allclose(reduced, [tokens[:5].mean(axis=0), tokens[5:].mean(axis=0)])
    assert np.allclose(centers, [positions[:5].mean(axis=0), positions[5:].mean(axis=0)])

    same, same_positions = downsample_knn_variant(tokens, positions, target=10)
    assert same is tokens and same_positions is positions


def test_knn_variant_reduces_only_the_final_level():
    rng = np.random.default_rng(1)
    levels = [TokenLevel(rng.standard_normal((n, 4)), rng.uniform(0, 1, (n, 3))) for n in (20, 30, 40)]
    reduced = reduce_levels(levels, "knn_downsample", target=8)
    assert [len(level) for level in reduced[:2]] == [20, 30]
    assert len(reduced[2]) <= 8


def test_sparsify_outputs_128_tokens(stack, prompt, desk_context):
    queries = make_queries(embed_task(prompt, stack), stack)
    assert task_guided_sparsify(desk_context.levels, queries, stack).shape == (128, D_F)


def test_sparsify_is_invariant_to_token_order(stack, prompt, desk_context):
    queries = make_queries(embed_task(prompt, stack), stack)
    baseline = task_guided_sparsify(desk_context.levels, queries, stack)
    rng = np.random.default_rng(3)
    shuffled = []
    for level in desk_context.levels:
        order = rng.permutation(len(level))
        shuffled.append(TokenLevel(level.features[order], level.positions[order]))
    assert torch.max(torch.abs(task_guided_sparsify(shuffled, queries, stack) - baseline)) <= 1e-9


def test_full_and_no_depthwise_wiring_differ(tokenizer, prompt, desk_context):
    full = SparsifierStack(D_F, D_F, len(tokenizer), "full", seed=0)
    final_only = SparsifierStack(D_F, D_F, len(tokenizer), "no_depthwise", seed=0)
    queries = make_queries(embed_task(prompt, full), full)
    a = task_guided_sparsify(desk_context.levels, queries, full)
    b = task_guided_sparsify(desk_context.levels, queries, final_only)
    assert torch.max(torch.abs(a - b)) > 1e-3
    assert task_guided_sparsify(desk_context.levels[-1:], queries, final_only).shape == (128, D_F)


def test_learnable_queries_differ_from_task_queries(tokenizer, prompt, desk_context):
    full = SparsifierStack(D_F, D_F, len(tokenizer), "full", seed=0)
    seeded = SparsifierStack(D_F, D_F, len(tokenizer), "learnable_queries", seed=0)
    a = task_guided_sparsify(desk_context.levels, make_queries(embed_task(prompt, full), full), full)
    b = task_guided_sparsify(desk_context.levels, make_queries(embed_task(prompt, seeded), seeded), seeded)
    assert torch.max(torch.abs(a - b)) > 1e-3


def test_knn_downsample_differs_from_uniform_stride(tokenizer, prompt, desk_context):
    # 200 tokens per level, so a target of 32 forces both reductions to act
    full = SparsifierStack(D_F, D_F, len(tokenizer), "full", downsample_target=32, seed=0)
    knn = SparsifierStack(D_F, D_F, len(tokenizer), "knn_downsample", downsample_target=32, seed=0)
    assert all(len(level) > 32 for level in desk_context.levels)
    queries = make_queries(embed_task(prompt, full), full)
    a = task_guided_sparsify(desk_context.levels, queries, full)
    b = task_guided_sparsify(desk_context.levels, queries, knn)
    assert torch.max(torch.abs(a - b)) > 1e-3


def test_proximity_bias_hand_value():
    positions = np.array([[0.0, 0.0, 0.0], [0.15, 0.0, 0.0], [0.0, 0.3, 0.0]])
    bias = proximity_bias(positions, Point(0.0, 0.0, 0.0), 0.15)
    assert bias.tolist() == pytest.approx([0.0, -0.5, -2.0], abs=1e-12)


def test_location_steers_task_queries_only(tokenizer, prompt, desk_scene, desk_context):
    center = Point(*desk_scene.positions[0].astype(np.float64))
    full = SparsifierStack(D_F, D_F, len(tokenizer), "full", seed=0)
    queries = make_queries(embed_task(prompt, full), full)
    plain = task_guided_sparsify(desk_context.levels, queries, full)
    steered = task_guided_sparsify(desk_context.levels, queries, full, center)
    assert torch.max(torch.abs(plain - steered)) > 1e-6

    seeded = SparsifierStack(D_F, D_F, len(tokenizer), "learnable_queries", seed=0)
    seeds = make_queries(None, seeded)
    assert torch.equal(task_guided_sparsify(desk_context.levels, seeds, seeded, center),
                       task_guided_sparsify(desk_context.levels, seeds, seeded))


def test_sparsify_level_errors(stack, prompt, desk_context):
    queries = make_queries(embed_task(prompt, stack), stack)
    with pytest.raises(DimensionError):
        task_guided_sparsify(desk_context.levels[:2], queries, stack)
    narrow = [TokenLevel(level.features[:, :8], level.positions) for level in desk_context.levels]
    with pytest.raises(DimensionError):
        task_guided_sparsify(narrow, queries, stack)


def test_roi_tokens(stack, desk_scene, desk_context):
    center = desk_scene.positions[0].astype(np.float64)
    tokens, radius = location_guided_sparsify(desk_scene, desk_context.grid, Point(*center), stack)
    assert tokens.shape == (4, D_F)
    assert radius == pytest.approx(0.15)

    members, _ = roi_members(desk_context.grid, center)
    positions = desk_scene.positions.astype(np.float64)
    brute = np.flatnonzero(np.sum((positions - center) ** 2, axis=1) <= 0.15 ** 2)
    assert members.tolist() == brute.tolist()
    assert radius_query(desk_context.grid, center, 0.15).tolist() == brute.tolist()


def test_single_member_roi_is_the_value_path(stack, desk_scene):
    # One splat far from the rest: the ROI around it holds only that splat
    scene = GaussianScene(
        "lonely", np.vstack([desk_scene.positions, [[50.0, 50.0, 50.0]]]),
        np.vstack([desk_scene.scales, [[0.01] * 3]]), np.vstack([desk_scene.rotations, [[1.0, 0.0, 0.0, 0.0]]]),
        np.append(desk_scene.opacity, 1.0), np.vstack([desk_scene.colors, [[0.5] * 3]]),
        np.vstack([desk_scene.features, np.ones((1, D_F))]),
    )
    grid = SpatialGrid.build(scene.positions)
    tokens, _ = location_guided_sparsify(scene, grid, Point(50.0, 50.0, 50.0), stack)
    feature = torch.ones(1, D_F, dtype=DTYPE)
    expected = (feature @ stack.roi_pool.wv @ stack.roi_pool.wo).expand(4, D_F)
    assert torch.allclose(tokens, expected, atol=1e-12)


def test_scene_context_levels_match_the_sparsifier_width(desk_scene):
    context = SceneContext.build(desk_scene, "knn_downsample", n_sample=200, seed=0, target=16)
    assert len(context.levels) == 3
    assert all(level.features.shape[1] == D_F for level in context.levels)
    assert len(context.levels[-1]) <= 16


def test_assembly_lengths_and_drops(stack):
    scene_tokens = torch.randn(128, D_F, dtype=DTYPE)
    roi = torch.randn(4, D_F, dtype=DTYPE)
    task = torch.randn(7, D_F, dtype=DTYPE)
    assert project_and_assemble(roi, scene_tokens, task, stack).shape == (4 + 128 + 7, D_F)
    assert project_and_assemble(None, scene_tokens, task, stack).shape == (128 + 7, D_F)
    assert project_and_assemble(roi, scene_tokens, task, stack, drop_roi=True).shape == (128 + 7, D_F)
    assert project_and_assemble(roi, scene_tokens, task, stack, drop_vision=True).shape == (7, D_F)
    assert project_and_assemble(roi, scene_tokens, task, stack, drop_prompt=True).shape == (132, D_F)
    with pytest.raises(DimensionError):
        project_and_assemble(None, scene_tokens, task, stack, drop_scene=True, drop_prompt=True)
    with pytest.raises(DimensionError):
        project_and_assemble(None, scene_tokens[:100], task, stack)


def test_assembly_order_puts_roi_first(stack):
    scene_tokens = torch.randn(128, D_F, dtype=DTYPE)
    roi = torch.randn(4, D_F, dtype=DTYPE)
    task = torch.randn(2, D_F, dtype=DTYPE)
    sequence = project_and_assemble(roi, scene_tokens, task, stack)
    assert torch.equal(sequence[:4], project(roi, stack))
    assert torch.equal(sequence[4:132], project(scene_tokens, stack))
    assert torch.equal(sequence[132:], task)


def test_projection_is_linear_without_bias(stack):
    x = torch.randn(3, D_F, dtype=DTYPE)
    assert torch.allclose(project(2.5 * x, stack), 2.5 * project(x, stack), atol=1e-12)
    with pytest.raises(DimensionError):
        project(torch.zeros(3, 5, dtype=DTYPE), stack)


def test_token_dump_keeps_full_precision():
    tokens = SparseSceneTokens(scene=torch.tensor([[1.0 / 3.0, -2.0]], dtype=DTYPE),
                               roi=torch.tensor([[0.1, 0.2]], dtype=DTYPE), final_radius_m=0.3)
    record = json.loads(tokens.to_json("desk", "full"))
    assert set(record) == {"scene_id", "variant", "roi_present", "roi", "scene_tokens", "final_radius_m"}
    assert record["roi_present"] is True
    assert record["scene_tokens"][0][0] == 1.0 / 3.0
    assert record["final_radius_m"] == 0.3
    assert json.loads(SparseSceneTokens(scene=torch.zeros(1, 2, dtype=DTYPE)).to_json("d", "full"))["roi"] is None
