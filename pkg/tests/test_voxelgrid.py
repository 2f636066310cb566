import math

import numpy as np
import pytest

from voxel_layout.exceptions import EmptyGridError, OutOfBoundsError, ResolutionMismatchError
from voxel_layout.voxelgrid import (
    Cuboid,
    Frame,
    OccupancyGrid,
    SparseVoxelSet,
    face_points,
    grid_difference,
    iou,
    solid_moments,
    surface_mask,
    surface_points,
    voxelize,
)


def test_voxelize_counts_voxel_centers():
    # [0, 0.5]^3 holds the centers of the lower 4x4x4 voxels at G=8
    grid = voxelize([Cuboid.from_bounds((0, 0, 0), (0.5, 0.5, 0.5))], 8)

    assert grid.occupied_count == 64
    assert grid.cells[:4, :4, :4].all()
    assert not grid.cells[4:].any()


def test_voxelize_union_and_empty_shape():
    shape = [
        Cuboid.from_bounds((0, 0, 0), (0.25, 1, 1)),
        Cuboid.from_bounds((0.75, 0, 0), (1, 1, 1)),
    ]

    assert voxelize(shape, 4).occupied_count == 32
    assert voxelize([], 4).is_empty


def test_voxelize_rotated_cuboid():
    square = Cuboid((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    turned = Cuboid((0.5, 0.5, 0.5), (0.25, 0.25, 0.25), yaw=math.pi / 2)

    assert voxelize([square], 8).same_cells(voxelize([turned], 8))


def test_voxelize_rejects_shapes_outside_the_cube():
    with pytest.raises(OutOfBoundsError):
        voxelize([Cuboid.from_bounds((0.5, 0.5, 0.5), (1.2, 1, 1))], 8)


def test_voxelize_rejects_tiny_resolution():
    with pytest.raises(ValueError, match="at least 2"):
        voxelize([], 1)


def test_grid_difference_is_exact():
    before = voxelize([Cuboid.from_bounds((0, 0, 0), (0.5, 1, 1))], 8)
    added = voxelize([Cuboid.from_bounds((0.5, 0, 0), (0.75, 1, 0.25))], 8)
    after = before.union(added)

    difference = grid_difference(after, before)

    assert difference.to_grid().same_cells(added.minus(before))
    assert len(difference) == after.occupied_count - before.occupied_count


def test_grid_difference_of_identical_grids_is_empty():
    grid = voxelize([Cuboid.from_bounds((0, 0, 0), (1, 1, 0.5))], 4)

    assert len(grid_difference(grid, grid)) == 0


def test_grid_difference_checks_resolution_and_frame():
    with pytest.raises(ResolutionMismatchError):
        grid_difference(OccupancyGrid.empty(8), OccupancyGrid.empty(4))
    with pytest.raises(ResolutionMismatchError):
        grid_difference(OccupancyGrid.empty(4, Frame.CANONICAL), OccupancyGrid.empty(4, Frame.CANONICAL))


def test_set_operations_check_frames():
    with pytest.raises(ResolutionMismatchError):
        OccupancyGrid.empty(4).union(OccupancyGrid.empty(4, Frame.CANONICAL))


def test_grid_cells_are_read_only():
    grid = OccupancyGrid.empty(4)

    with pytest.raises(ValueError, match="read-only"):
        grid.cells[0, 0, 0] = True


def test_grid_shape_is_validated():
    with pytest.raises(ValueError, match="Expected 4"):
        OccupancyGrid(4, np.zeros((4, 4, 3), dtype=bool))


def test_sparse_set_orders_and_bounds():
    voxels = SparseVoxelSet(np.array([[0, 0, 1], [1, 2, 3]]), 4)

    assert len(voxels) == 2
    assert voxels.to_grid().occupied_count == 2
    np.testing.assert_allclose(voxels.centers()[0], [0.125, 0.125, 0.375])

    with pytest.raises(ValueError, match="strictly increasing"):
        SparseVoxelSet(np.array([[1, 2, 3], [0, 0, 1]]), 4)
    with pytest.raises(OutOfBoundsError):
        SparseVoxelSet(np.array([[0, 0, 4]]), 4)


def test_sparse_set_diameter():
    assert SparseVoxelSet(np.zeros((0, 3)), 4).diameter() == 0.0
    single = SparseVoxelSet(np.array([[0, 0, 0]]), 4)
    assert single.diameter() == pytest.approx(math.sqrt(3) / 4)


def test_surface_of_a_solid_cube():
    grid = OccupancyGrid.full(4)

    mask = surface_mask(grid)

    # every voxel of a 4^3 block except the inner 2^3 touches the outside
    assert mask.sum() == 64 - 8
    assert len(surface_points(grid)) == 56


def test_surface_of_empty_grid_raises():
    with pytest.raises(EmptyGridError):
        surface_points(OccupancyGrid.empty(4))


def test_iou():
    a = voxelize([Cuboid.from_bounds((0, 0, 0), (0.5, 1, 1))], 4)
    b = voxelize([Cuboid.from_bounds((0.25, 0, 0), (0.75, 1, 1))], 4)

    assert iou(a, a) == 1.0
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(OccupancyGrid.empty(4), OccupancyGrid.empty(4)) == 1.0


def test_face_points_of_a_single_voxel():
    cells = np.zeros((4, 4, 4), dtype=bool)
    cells[1, 2, 3] = True

    points = face_points(OccupancyGrid(4, cells)).points

    center = np.array([1.5, 2.5, 3.5]) / 4
    assert len(points) == 6
    np.testing.assert_allclose(points.mean(axis=0), center)
    np.testing.assert_allclose(np.abs(points - center).max(axis=1), np.full(6, 1 / 8))


def test_face_points_skip_shared_faces():
    # a 2x2x2 block exposes 4 faces on each of its 6 sides
    assert len(face_points(OccupancyGrid.full(2))) == 24


def test_solid_moments_of_the_unit_cube():
    centroid, spread = solid_moments(OccupancyGrid.full(8))

    np.testing.assert_allclose(centroid, (0.5, 0.5, 0.5))
    # 1/12 per axis
    assert spread == pytest.approx(0.25)


def test_solid_moments_match_the_continuous_box():
    grid = voxelize([Cuboid.from_bounds((0.25, 0, 0), (0.75, 0.25, 1))], 16)

    centroid, spread = solid_moments(grid)

    np.testing.assert_allclose(centroid, (0.5, 0.125, 0.5))
    assert spread == pytest.approx((0.5**2 + 0.25**2 + 1) / 12)


def test_moments_and_faces_of_empty_grid_raise():
    with pytest.raises(EmptyGridError):
        solid_moments(OccupancyGrid.empty(4))
    with pytest.raises(EmptyGridError):
        face_points(OccupancyGrid.empty(4))
