"""Binary voxel occupancy grids over the unit scene cube.

Voxel (h, w, l) covers the world cube [h/G, (h+1)/G) x [w/G, (w+1)/G) x [l/G, (l+1)/G). The world
axes are (x, y, z) with z pointing up, so yaw rotations act on the (x, y) plane.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

from .exceptions import EmptyGridError, OutOfBoundsError, ResolutionMismatchError

_LOGGER = logging.getLogger(__name__)

# slack on inside/outside tests, far below any voxel spacing we support
GEOMETRY_EPS = 1e-9

_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class Frame(StrEnum):
    """Coordinate frame of a grid."""

    SCENE = "scene"
    CANONICAL = "canonical"


@dataclass(frozen=True)
class Cuboid:
    """Cuboid rotated by `yaw` about the vertical axis through its center."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    yaw: float = 0.0

    @classmethod
    def from_bounds(cls, lower: Sequence[float], upper: Sequence[float], yaw: float = 0.0) -> Cuboid:
        """Create an axis-aligned (before yaw) cuboid from its lower and upper corners."""
        center = tuple((lo + hi) / 2 for lo, hi in zip(lower, upper, strict=True))
        half = tuple((hi - lo) / 2 for lo, hi in zip(lower, upper, strict=True))
        return cls(center, half, yaw)  # type: ignore[arg-type]

    def corners(self) -> np.ndarray:
        """Return the 8 world-space corners, shape (8, 3)."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        local = signs * np.asarray(self.half_extents)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rotated = np.column_stack(
            [c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]],
        )
        return rotated + np.asarray(self.center)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of the (n, 3) points lying inside the cuboid (boundary included)."""
        delta = np.asarray(points, dtype=float) - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local_x = c * delta[:, 0] + s * delta[:, 1]
        local_y = -s * delta[:, 0] + c * delta[:, 1]
        hx, hy, hz = self.half_extents
        return (
            (np.abs(local_x) <= hx + GEOMETRY_EPS)
            & (np.abs(local_y) <= hy + GEOMETRY_EPS)
            & (np.abs(delta[:, 2]) <= hz + GEOMETRY_EPS)
        )


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Binary occupancy at resolution G, cells indexed (h, w, l)."""

    resolution: int
    cells: np.ndarray = field(repr=False)
    frame: Frame = Frame.SCENE

    def __post_init__(self):
        """Validate the cell array."""
        if self.resolution < 1:
            raise ValueError(f"Resolution must be positive, got {self.resolution}")
        cells = np.asarray(self.cells, dtype=bool)
        if cells.shape != (self.resolution,) * 3:
            raise ValueError(f"Expected {self.resolution}^3 cells, got shape {cells.shape}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def empty(cls, resolution: int, frame: Frame = Frame.SCENE) -> OccupancyGrid:
        """Create an unoccupied grid."""
        return cls(resolution, np.zeros((resolution,) * 3, dtype=bool), frame)

    @classmethod
    def full(cls, resolution: int, frame: Frame = Frame.SCENE) -> OccupancyGrid:
        """Create a fully occupied grid."""
        return cls(resolution, np.ones((resolution,) * 3, dtype=bool), frame)

    @property
    def occupied_count(self) -> int:
        """Number of occupied voxels."""
        return int(self.cells.sum())

    @property
    def is_empty(self) -> bool:
        """Whether no voxel is occupied."""
        return not self.cells.any()

    def positions(self) -> SparseVoxelSet:
        """Occupied voxel positions in row-major order."""
        return SparseVoxelSet(np.argwhere(self.cells), self.resolution)

    def centers(self) -> np.ndarray:
        """World-space centers of the occupied voxels, shape (n, 3)."""
        return voxel_centers(np.argwhere(self.cells), self.resolution)

    def union(self, other: OccupancyGrid) -> OccupancyGrid:
        """Voxel-wise OR."""
        _check_compatible(self, other)
        return OccupancyGrid(self.resolution, self.cells | other.cells, self.frame)

    def intersection(self, other: OccupancyGrid) -> OccupancyGrid:
        """Voxel-wise AND."""
        _check_compatible(self, other)
        return OccupancyGrid(self.resolution, self.cells & other.cells, self.frame)

    def minus(self, other: OccupancyGrid) -> OccupancyGrid:
        """Voxels occupied here and free in `other`."""
        _check_compatible(self, other)
        return OccupancyGrid(self.resolution, self.cells & ~other.cells, self.frame)

    def with_frame(self, frame: Frame) -> OccupancyGrid:
        """Return the same cells tagged with another frame."""
        return OccupancyGrid(self.resolution, self.cells, frame)

    def same_cells(self, other: OccupancyGrid) -> bool:
        """Whether both grids have identical resolution and occupancy."""
        return self.resolution == other.resolution and bool(np.array_equal(self.cells, other.cells))


@dataclass(frozen=True, eq=False)
class SparseVoxelSet:
    """Active voxel positions, strictly increasing in row-major order."""

    positions: np.ndarray = field(repr=False)
    resolution: int

    def __post_init__(self):
        """Validate ordering and bounds."""
        positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        if len(positions) and (positions.min() < 0 or positions.max() >= self.resolution):
            raise OutOfBoundsError(f"Voxel position outside [0, {self.resolution})^3")
        if len(positions) > 1:
            flat = np.ravel_multi_index(positions.T, (self.resolution,) * 3)
            if np.any(np.diff(flat) <= 0):
                raise ValueError("Voxel positions must be strictly increasing in row-major order")
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        """Number of active voxels."""
        return len(self.positions)

    def to_grid(self, frame: Frame = Frame.SCENE) -> OccupancyGrid:
        """Densify into an occupancy grid."""
        cells = np.zeros((self.resolution,) * 3, dtype=bool)
        if len(self.positions):
            cells[tuple(self.positions.T)] = True
        return OccupancyGrid(self.resolution, cells, frame)

    def centers(self) -> np.ndarray:
        """World-space voxel centers, shape (n, 3)."""
        return voxel_centers(self.positions, self.resolution)

    def diameter(self) -> float:
        """Length of the diagonal of the bounding box of the voxel centers."""
        if not len(self.positions):
            return 0.0
        span = (self.positions.max(axis=0) - self.positions.min(axis=0) + 1) / self.resolution
        return float(np.linalg.norm(span))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in world units."""

    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        """Validate finiteness."""
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("Point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        """Number of points."""
        return len(self.points)


def voxel_centers(positions: np.ndarray, resolution: int) -> np.ndarray:
    """Map integer (h, w, l) positions to world-space voxel centers."""
    return (np.asarray(positions, dtype=float) + 0.5) / resolution


def _check_compatible(a: OccupancyGrid, b: OccupancyGrid) -> None:
    if a.resolution != b.resolution:
        raise ResolutionMismatchError(f"Resolution mismatch: {a.resolution} != {b.resolution}")
    if a.frame != b.frame:
        raise ResolutionMismatchError(f"Frame mismatch: {a.frame} != {b.frame}")


def voxelize(shape: Iterable[Cuboid], resolution: int, frame: Frame = Frame.SCENE) -> OccupancyGrid:
    """Rasterize a union of cuboids: a voxel is occupied iff its center lies inside the shape."""
    if resolution < 2:  # noqa: PLR2004
        raise ValueError(f"Resolution must be at least 2, got {resolution}")
    cuboids = list(shape)

    cells = np.zeros((resolution,) * 3, dtype=bool)
    if not cuboids:
        return OccupancyGrid(resolution, cells, frame)

    axis = (np.arange(resolution) + 0.5) / resolution
    grid_points = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

    for cuboid in cuboids:
        corners = cuboid.corners()
        if corners.min() < -GEOMETRY_EPS or corners.max() > 1 + GEOMETRY_EPS:
            raise OutOfBoundsError(f"Cuboid {cuboid} exceeds the unit cube")
        cells |= cuboid.contains(grid_points).reshape((resolution,) * 3)

    return OccupancyGrid(resolution, cells, frame)


def grid_difference(after: OccupancyGrid, before: OccupancyGrid) -> SparseVoxelSet:
    """Positions occupied in `after` and free in `before`."""
    if after.resolution != before.resolution:
        raise ResolutionMismatchError(f"Resolution mismatch: {after.resolution} != {before.resolution}")
    if after.frame != Frame.SCENE or before.frame != Frame.SCENE:
        raise ResolutionMismatchError("Spatial differencing requires scene-frame grids")
    return after.minus(before).positions()


def surface_mask(grid: OccupancyGrid) -> np.ndarray:
    """Occupied voxels with at least one free 6-neighbour; outside the grid counts as free."""
    padded = np.pad(grid.cells, 1, constant_values=False)
    interior = np.ones_like(grid.cells)
    n = grid.resolution
    for dh, dw, dl in _NEIGHBOURS:
        interior &= padded[1 + dh : 1 + dh + n, 1 + dw : 1 + dw + n, 1 + dl : 1 + dl + n]
    return grid.cells & ~interior


def surface_points(grid: OccupancyGrid) -> PointCloud:
    """Centers of the occupied voxels touching free space."""
    if grid.is_empty:
        raise EmptyGridError("Cannot extract surface points from an empty grid")
    return PointCloud(voxel_centers(np.argwhere(surface_mask(grid)), grid.resolution))


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    """Intersection over union; 1.0 when both grids are empty."""
    if a.resolution != b.resolution:
        raise ResolutionMismatchError(f"Resolution mismatch: {a.resolution} != {b.resolution}")
    union = np.count_nonzero(a.cells | b.cells)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.cells & b.cells) / union


def face_points(grid: OccupancyGrid) -> PointCloud:
    """Centers of the voxel faces separating occupied from free space."""
    if grid.is_empty:
        raise EmptyGridError("Cannot extract face points from an empty grid")
    padded = np.pad(grid.cells, 1, constant_values=False)
    n = grid.resolution
    faces = []
    for direction in _NEIGHBOURS:
        dh, dw, dl = direction
        free = ~padded[1 + dh : 1 + dh + n, 1 + dw : 1 + dw + n, 1 + dl : 1 + dl + n]
        exposed = np.argwhere(grid.cells & free)
        faces.append(voxel_centers(exposed, n) + np.asarray(direction, dtype=float) / (2 * n))
    return PointCloud(np.vstack(faces))


def solid_moments(grid: OccupancyGrid) -> tuple[np.ndarray, float]:
    """Centroid of the occupied voxel cubes and the mean squared distance to it over their volume."""
    if grid.is_empty:
        raise EmptyGridError("Cannot take the moments of an empty grid")
    centers = grid.centers()
    centroid = centers.mean(axis=0)
    # each cube of side h adds h^2/12 per axis about its own center
    spread = float(np.mean(np.sum(np.square(centers - centroid), axis=1))) + 0.25 / grid.resolution**2
    return centroid, spread
