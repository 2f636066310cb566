import math

import numpy as np
import pytest

from voxel_layout.exceptions import DegenerateCorrespondenceError, EmptyGridError
from voxel_layout.metrics import yaw_error
from voxel_layout.registration import (
    IcpConfig,
    Placement,
    RotationMode,
    SimilarityTransform,
    fit_placement,
    refine_with_moments,
    register_points,
    source_points,
    umeyama,
)
from voxel_layout.scenes import CATALOG
from voxel_layout.utils import yaw_matrix
from voxel_layout.voxelgrid import Frame, OccupancyGrid, PointCloud, SparseVoxelSet


def _points(count: int = 40, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-0.5, 0.5, size=(count, 3))


@pytest.mark.parametrize("mode", list(RotationMode))
def test_umeyama_recovers_a_similarity_exactly(mode):
    source = _points()
    target = 0.3 * source @ yaw_matrix(0.7).T + np.array([0.2, 0.6, 0.1])

    transform = umeyama(PointCloud(source), PointCloud(target), mode=mode)

    assert transform.scale == pytest.approx(0.3)
    assert transform.yaw == pytest.approx(0.7)
    np.testing.assert_allclose(transform.translation, [0.2, 0.6, 0.1], atol=1e-10)
    np.testing.assert_allclose(transform.apply(source), target, atol=1e-10)


def test_umeyama_with_explicit_correspondences():
    source = _points()
    target = 2.0 * source + 1.0
    order = np.random.default_rng(1).permutation(len(source))
    pairs = np.column_stack([order, np.arange(len(source))])

    transform = umeyama(PointCloud(source), PointCloud(target[order]), pairs)

    assert transform.scale == pytest.approx(2.0)
    np.testing.assert_allclose(transform.translation, [1.0, 1.0, 1.0], atol=1e-10)


def test_umeyama_rejects_degenerate_sets():
    line = np.column_stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)])

    with pytest.raises(DegenerateCorrespondenceError):
        umeyama(PointCloud(line), PointCloud(line))
    with pytest.raises(DegenerateCorrespondenceError):
        umeyama(PointCloud(_points(2)), PointCloud(_points(2)))


def test_icp_recovers_a_rotated_point_set():
    source = _points(200, seed=3)
    target = 0.5 * source @ yaw_matrix(0.9).T + np.array([0.4, 0.5, 0.3])

    result = register_points(source, target, IcpConfig(yaw_candidates=8))

    assert result.rms < 1e-6
    assert result.transform.scale == pytest.approx(0.5, rel=1e-4)
    assert yaw_error(result.transform.yaw, 0.9) < 1e-4


def test_icp_history_never_increases():
    source = _points(100, seed=4)
    target = 0.8 * source @ yaw_matrix(2.0).T + 0.5

    result = register_points(source, target, IcpConfig(yaw_candidates=1))

    assert all(b <= a for a, b in zip(result.history, result.history[1:], strict=False))


def _placement_error(fitted: Placement, truth: Placement, symmetry: int) -> tuple[float, float, float]:
    """Yaw error (radians), relative scale error and translation error (world units)."""
    return (
        yaw_error(fitted.yaw, truth.yaw, symmetry),
        abs(fitted.scale / truth.scale - 1),
        float(np.abs(np.subtract(fitted.translation, truth.translation)).max()),
    )


def test_fit_placement_of_a_voxelized_object():
    placement = Placement("bed_0", "bed", (0.5, 0.5, 0.25), math.pi / 2, 0.5)
    region = CATALOG["bed"].placed_grid(placement, 32).positions()

    fitted = fit_placement(CATALOG.canonical_grid("bed", 32), region, object_id="bed_0", class_name="bed")

    assert fitted.object_id == "bed_0"
    assert fitted.class_name == "bed"
    np.testing.assert_allclose(fitted.translation, placement.translation, atol=0.5 / 32)
    assert fitted.scale == pytest.approx(0.5, rel=0.01)
    assert yaw_error(fitted.yaw, placement.yaw) < math.radians(2)


def test_fit_placement_recovers_its_own_canonical_grid():
    canonical = CATALOG.canonical_grid("sofa", 16)

    fitted = fit_placement(canonical, canonical.with_frame(Frame.SCENE).positions())

    np.testing.assert_allclose(fitted.translation, (0.5, 0.5, 0.5), atol=0.5 / 16)
    assert fitted.scale == pytest.approx(1.0, rel=0.01)
    assert yaw_error(fitted.yaw, 0.0) < math.radians(2)


def test_noiseless_transforms_are_recovered():
    rng = np.random.default_rng(11)
    config = IcpConfig()
    names = list(CATALOG)
    passed = 0
    for _ in range(100):
        name = names[int(rng.integers(len(names)))]
        scale = float(rng.uniform(0.5, 1.0))
        truth = Placement("x", name, tuple(rng.uniform(scale / 2, 1 - scale / 2, size=3)), rng.uniform(-3, 3), scale)
        source = source_points(CATALOG.canonical_grid(name, 16), config)
        target = truth.apply(source + 0.5)

        transform = register_points(source, target, config).transform

        fitted = Placement("x", name, tuple(transform.translation), transform.yaw, transform.scale)
        yaw, scale_error, offset = _placement_error(fitted, truth, CATALOG[name].symmetry)
        passed += yaw <= math.radians(2) and scale_error <= 0.01 and offset <= 0.5 / 16

    assert passed >= 95


def test_quarter_turned_voxelizations_are_recovered():
    rng = np.random.default_rng(12)
    names = list(CATALOG)
    passed = 0
    for _ in range(100):
        name = names[int(rng.integers(len(names)))]
        # on the voxel lattice, so the voxelization at scale 0.75 is exact
        corner = np.append(rng.integers(0, 5, size=2) / 16, 0.0)
        truth = Placement("x", name, tuple(corner + 0.375), math.pi / 2, 0.75)
        region = CATALOG[name].placed_grid(truth, 16).positions()

        fitted = fit_placement(CATALOG.canonical_grid(name, 16), region)

        yaw, scale_error, offset = _placement_error(fitted, truth, CATALOG[name].symmetry)
        passed += yaw <= math.radians(2) and scale_error <= 0.01 and offset <= 0.5 / 16

    assert passed >= 95


def test_voxel_aligned_shift_moves_the_translation_by_the_shift():
    placement = Placement("desk_0", "desk", (0.25, 0.25, 0.25), 0.0, 0.5)
    grid = CATALOG["desk"].placed_grid(placement, 16)
    shifted = np.roll(grid.cells, (3, 2), axis=(0, 1))
    canonical = CATALOG.canonical_grid("desk", 16)

    before = fit_placement(canonical, grid.positions())
    after = fit_placement(canonical, OccupancyGrid(16, shifted).positions())

    np.testing.assert_allclose(np.subtract(after.translation, before.translation), (3 / 16, 2 / 16, 0.0), atol=1e-6)
    assert after.scale == pytest.approx(before.scale, abs=1e-9)


def test_moment_refinement_is_exact_for_aligned_voxelizations():
    placement = Placement("shelf_0", "shelf", (0.5, 0.5, 0.25), -math.pi / 2, 0.5)
    region = CATALOG["shelf"].placed_grid(placement, 16)
    rough = SimilarityTransform(placement.rotation, 0.4, np.zeros(3))

    refined = refine_with_moments(rough, CATALOG.canonical_grid("shelf", 16), region)

    assert refined.scale == pytest.approx(0.5, rel=1e-9)
    np.testing.assert_allclose(refined.translation, placement.translation, atol=1e-9)


def test_fit_placement_rejects_empty_inputs():
    canonical = CATALOG.canonical_grid("table", 16)

    with pytest.raises(EmptyGridError):
        fit_placement(canonical, SparseVoxelSet(np.zeros((0, 3)), 16))
    with pytest.raises(EmptyGridError):
        fit_placement(OccupancyGrid.empty(16), canonical.positions())


def test_placement_maps_the_cube_center_to_its_translation():
    placement = Placement("a", "table", (0.3, 0.4, 0.5), math.pi / 2, 0.2)

    mapped = placement.apply(np.array([[0.5, 0.5, 0.5], [1.0, 0.5, 0.5]]))

    np.testing.assert_allclose(mapped[0], [0.3, 0.4, 0.5])
    np.testing.assert_allclose(mapped[1], [0.3, 0.5, 0.5], atol=1e-12)


def test_placement_validation():
    with pytest.raises(ValueError, match="Scale"):
        Placement("a", "bed", (0, 0, 0), 0.0, 0.0)
    with pytest.raises(ValueError, match="RMS"):
        Placement("a", "bed", (0, 0, 0), 0.0, 1.0, rms_error=float("nan"))


def test_icp_config_validation():
    with pytest.raises(ValueError, match="max_source_points"):
        IcpConfig(max_source_points=2)
