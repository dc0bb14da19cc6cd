import math

import numpy as np
import pytest

from src.errors import EmptySceneError, GVLMError
from src.spatial import SpatialGrid, radius_query, roi_members


def test_closed_ball_boundary():
    grid = SpatialGrid.build(np.array([[0.10, 0.0, 0.0], [0.151, 0.0, 0.0], [0.0, 0.15, 0.0]]))
    assert radius_query(grid, [0.0, 0.0, 0.0], 0.15).tolist() == [0, 2]


def test_radius_query_matches_linear_scan():
    rng = np.random.default_rng(0)
    positions = rng.uniform(-1.0, 2.0, size=(2000, 3))
    grid = SpatialGrid.build(positions, cell_size=0.15)
    for _ in range(25):
        center = rng.uniform(-1.0, 2.0, size=3)
        r = float(rng.uniform(0.05, 0.6))
        expected = np.flatnonzero(np.sum((positions - center) ** 2, axis=1) <= r * r)
        assert radius_query(grid, center, r).tolist() == expected.tolist()


def test_radius_query_large_radius_scans_occupied_cells():
    positions = np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
    grid = SpatialGrid.build(positions, cell_size=0.15)
    assert radius_query(grid, [2.5, 2.5, 2.5], 10.0).tolist() == [0, 1]


def test_radius_query_rejects_non_positive_radius():
    grid = SpatialGrid.build(np.zeros((1, 3)))
    with pytest.raises(GVLMError):
        radius_query(grid, [0.0, 0.0, 0.0], 0.0)


def test_roi_first_pass_hit():
    grid = SpatialGrid.build(np.array([[0.10, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    members, radius = roi_members(grid, [0.0, 0.0, 0.0])
    assert members.tolist() == [0]
    assert radius == pytest.approx(0.15)


def test_roi_grows_until_non_empty():
    grid = SpatialGrid.build(np.array([[0.20, 0.0, 0.0], [2.0, 2.0, 2.0]]))
    members, radius = roi_members(grid, [0.0, 0.0, 0.0])
    assert members.tolist() == [0]
    assert radius == pytest.approx(0.30)


def test_roi_far_outside_the_scene_still_terminates():
    grid = SpatialGrid.build(np.array([[0.0, 0.0, 0.0]]))
    members, radius = roi_members(grid, [3.0, 0.0, 0.0])
    assert members.tolist() == [0]
    assert radius >= 3.0


def test_roi_on_empty_scene():
    grid = SpatialGrid.build(np.zeros((0, 3)))
    with pytest.raises(EmptySceneError, match="no gaussians"):
        roi_members(grid, [0.0, 0.0, 0.0])


@pytest.mark.parametrize("r0", [0.15, 0.30])
def test_roi_radius_matches_nearest_splat_on_random_scenes(r0):
    rng = np.random.default_rng(int(r0 * 100))
    step = 0.15
    for _ in range(50):
        positions = rng.uniform([0.0, 0.0, 0.0], [4.0, 4.0, 2.5], size=(int(rng.integers(1, 40)), 3))
        grid = SpatialGrid.build(positions)
        center = rng.uniform([-1.0, -1.0, -1.0], [5.0, 5.0, 3.5])
        members, radius = roi_members(grid, center, r0, step)

        distances = np.sqrt(np.sum((positions - center) ** 2, axis=1))
        nearest = float(distances.min())
        expected = r0 + step * max(0, math.ceil((nearest - r0) / step))
        assert members.size > 0
        assert radius == pytest.approx(expected, abs=1e-9)
        assert nearest <= radius + 1e-12
        assert radius == pytest.approx(r0) or nearest > radius - step
        brute = np.flatnonzero(np.sum((positions - center) ** 2, axis=1) <= radius * radius)
        assert members.tolist() == brute.tolist()
