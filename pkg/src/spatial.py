"""
Uniform-grid radius search over splat positions and the growing-radius ROI selection.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .config import GRID_CELL_M, ROI_RADIUS_M, ROI_STEP_M
from .errors import EmptySceneError, GVLMError

# Configure logging
logger = logging.getLogger(__name__)

Cell = Tuple[int, int, int]


def squared_distances(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    delta = points - center
    return delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1] + delta[:, 2] * delta[:, 2]


@dataclass(frozen=True)
class SpatialGrid:
    """Hash grid mapping integer cells floor(position / cell_size) to ascending splat indices."""
    cell_size: float
    positions: np.ndarray
    cells: Dict[Cell, np.ndarray]

    @classmethod
    def build(cls, positions: np.ndarray, cell_size: float = GRID_CELL_M) -> "SpatialGrid":
        if cell_size <= 0:
            raise GVLMError(f"cell size must be positive, got {cell_size}")
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        cells: Dict[Cell, np.ndarray] = {}
        if len(positions):
            keys = np.floor(positions / cell_size).astype(np.int64)
            order = np.lexsort((np.arange(len(keys)), keys[:, 2], keys[:, 1], keys[:, 0]))
            sorted_keys = keys[order]
            breaks = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
            for group in np.split(order, breaks):
                cells[tuple(int(c) for c in keys[group[0]])] = np.sort(group)
        logger.debug(f"Built grid with {len(cells)} cells of {cell_size} m over {len(positions)} splats")
        return cls(cell_size, positions, cells)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def cell_of(self, point: np.ndarray) -> Cell:
        return tuple(int(c) for c in np.floor(np.asarray(point, dtype=np.float64) / self.cell_size))


def radius_query(grid: SpatialGrid, center, r: float) -> np.ndarray:
    """Indices of splats within the closed ball of radius ``r`` around ``center``, ascending."""
    if r <= 0:
        raise GVLMError(f"radius must be positive, got {r}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    lower = np.floor((center - r) / grid.cell_size).astype(np.int64)
    upper = np.floor((center + r) / grid.cell_size).astype(np.int64)

    span = int(np.prod(upper - lower + 1))
    if span > len(grid.cells):
        # Fewer occupied cells than cells in the box: scan the occupied ones
        chunks = [idx for cell, idx in grid.cells.items()
                  if all(lower[a] <= cell[a] <= upper[a] for a in range(3))]
    else:
        ranges = [range(int(lower[a]), int(upper[a]) + 1) for a in range(3)]
        chunks = [grid.cells[cell] for cell in itertools.product(*ranges) if cell in grid.cells]
    if not chunks:
        return np.zeros(0, dtype=np.int64)

    candidates = np.concatenate(chunks)
    inside = squared_distances(grid.positions[candidates], center) <= r * r
    return np.sort(candidates[inside]).astype(np.int64)


def roi_members(grid: SpatialGrid, center, r0: float = ROI_RADIUS_M,
                step: float = ROI_STEP_M) -> Tuple[np.ndarray, float]:
    """Grow the ROI radius r0 + k*step until at least one splat falls inside."""
    if len(grid) == 0:
        raise EmptySceneError("no gaussians")
    if r0 <= 0 or step <= 0:
        raise GVLMError(f"ROI radius and step must be positive, got {r0}, {step}")
    center = np.asarray(center, dtype=np.float64).reshape(3)

    # The farthest bounding-box corner bounds the distance to any splat
    lower, upper = grid.positions.min(axis=0), grid.positions.max(axis=0)
    farthest = math.sqrt(float(np.max(squared_distances(
        np.array(list(itertools.product(*zip(lower, upper)))), center))))
    max_k = int(math.ceil(max(0.0, farthest - r0) / step)) + 1

    for k in range(max_k + 1):
        radius = r0 + k * step
        members = radius_query(grid, center, radius)
        if members.size:
            if k:
                logger.debug(f"ROI around {center.tolist()} grew to {radius:.2f} m after {k} steps")
            return members, radius
    raise EmptySceneError("no gaussians within the scene bounds")
