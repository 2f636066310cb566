"""Placement recovery: register an object's canonical surface to a scene region with similarity ICP.

Canonical grids hold the object inside the unit cube; its reference point is the cube center
(0.5, 0.5, 0.5). A placement maps a canonical point p to scale * R(yaw) @ (p - 0.5) + translation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from scipy.spatial import cKDTree

from .const import ICP_MAX_ITERATIONS, ICP_MAX_SOURCE_POINTS, ICP_TOLERANCE, ICP_YAW_CANDIDATES
from .exceptions import DegenerateCorrespondenceError, EmptyGridError, RegistrationError
from .utils import numpy_rng, wrap_angle, yaw_matrix
from .voxelgrid import OccupancyGrid, PointCloud, SparseVoxelSet, face_points, solid_moments

_LOGGER = logging.getLogger(__name__)

# a candidate must beat the incumbent by this much to win, so ties go to the lower index
_TIE_MARGIN = 1e-12


class RotationMode(StrEnum):
    """Rotation parameterization of the fitted transform."""

    YAW = "yaw"
    FULL = "full"


@dataclass(frozen=True)
class IcpConfig:
    """Iteration controls of the placement fit."""

    max_iterations: int = ICP_MAX_ITERATIONS
    tolerance: float = ICP_TOLERANCE
    yaw_candidates: int = ICP_YAW_CANDIDATES
    rotation_mode: RotationMode = RotationMode.YAW
    max_source_points: int = ICP_MAX_SOURCE_POINTS
    moment_refinement: bool = True
    seed: int = 0

    def __post_init__(self):
        """Validate the iteration controls."""
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.yaw_candidates < 1:
            raise ValueError("yaw_candidates must be at least 1")
        if self.max_source_points < 3:  # noqa: PLR2004
            raise ValueError("max_source_points must be at least 3")


@dataclass(frozen=True)
class Placement:
    """Similarity transform placing one object in the scene."""

    object_id: str
    class_name: str
    translation: tuple[float, float, float]
    yaw: float
    scale: float
    rms_error: float = 0.0

    def __post_init__(self):
        """Validate scale and residual."""
        if not self.scale > 0:
            raise ValueError(f"Scale must be positive, got {self.scale}")
        if not math.isfinite(self.rms_error) or self.rms_error < 0:
            raise ValueError(f"RMS error must be finite and non-negative, got {self.rms_error}")

    @property
    def rotation(self) -> np.ndarray:
        """Yaw rotation matrix."""
        return yaw_matrix(self.yaw)

    def apply(self, canonical_points: np.ndarray) -> np.ndarray:
        """Map canonical unit-cube points into the scene."""
        centered = np.asarray(canonical_points, dtype=float) - 0.5
        return self.scale * centered @ self.rotation.T + np.asarray(self.translation)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(repr=False)
    scale: float
    translation: np.ndarray

    @property
    def yaw(self) -> float:
        """Heading of the rotation about the vertical axis."""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (n, 3) points."""
        return self.scale * points @ self.rotation.T + self.translation


@dataclass
class IcpResult:
    """Outcome of one ICP run from a single initial yaw."""

    transform: SimilarityTransform
    rms: float
    history: list[float]
    iterations: int
    candidate: int


def umeyama(
    source: PointCloud,
    target: PointCloud,
    correspondences: np.ndarray | None = None,
    mode: RotationMode = RotationMode.YAW,
) -> SimilarityTransform:
    """Closed-form least-squares similarity transform from source to target.

    `correspondences` is a (k, 2) array of (source index, target index); by default point i of the
    source matches point i of the target.
    """
    if correspondences is None:
        if len(source) != len(target):
            raise ValueError("Source and target sizes differ and no correspondences were given")
        src, tgt = source.points, target.points
    else:
        pairs = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
        src, tgt = source.points[pairs[:, 0]], target.points[pairs[:, 1]]
    return _solve_similarity(src, tgt, mode)


def _solve_similarity(src: np.ndarray, tgt: np.ndarray, mode: RotationMode) -> SimilarityTransform:
    if len(src) < 3:  # noqa: PLR2004
        raise DegenerateCorrespondenceError(f"Need at least 3 correspondences, got {len(src)}")

    mu_src = src.mean(axis=0)
    mu_tgt = tgt.mean(axis=0)
    p = src - mu_src
    q = tgt - mu_tgt
    var_src = float(np.square(p).sum())
    if np.linalg.matrix_rank(p, tol=1e-12) < 2 or var_src == 0.0:  # noqa: PLR2004
        raise DegenerateCorrespondenceError("Correspondence set is collinear or coincident")

    if mode == RotationMode.YAW:
        dot = float(np.sum(p[:, 0] * q[:, 0] + p[:, 1] * q[:, 1]))
        cross = float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]))
        yaw = math.atan2(cross, dot)
        rotation = yaw_matrix(yaw)
        scale = (math.hypot(dot, cross) + float(np.sum(p[:, 2] * q[:, 2]))) / var_src
    else:
        covariance = q.T @ p / len(src)
        u, d, vh = np.linalg.svd(covariance)
        reflection = np.eye(3)
        if np.linalg.det(u) * np.linalg.det(vh) < 0:
            reflection[-1, -1] = -1
        rotation = u @ reflection @ vh
        scale = float(np.trace(np.diag(d) @ reflection)) / (var_src / len(src))

    if not scale > 0:
        raise DegenerateCorrespondenceError(f"Non-positive scale estimate {scale}")
    translation = mu_tgt - scale * rotation @ mu_src
    return SimilarityTransform(rotation, scale, translation)


def _rms(transform: SimilarityTransform, source: np.ndarray, target: np.ndarray, tree: cKDTree):
    """Symmetric nearest-neighbour pairs and their rms under `transform`."""
    moved = transform.apply(source)
    forward_dist, forward_idx = tree.query(moved)
    backward_dist, backward_idx = cKDTree(moved).query(target)
    src = np.concatenate([source, source[backward_idx]])
    tgt = np.concatenate([target[forward_idx], target])
    dist = np.concatenate([forward_dist, backward_dist])
    return float(np.sqrt(np.mean(dist**2))), src, tgt


def icp(
    source: np.ndarray,
    target: np.ndarray,
    initial: SimilarityTransform,
    config: IcpConfig,
    candidate: int = 0,
) -> IcpResult:
    """Alternate nearest-neighbour matching and closed-form solving until the rms settles."""
    tree = cKDTree(target)
    transform = initial
    rms, src, tgt = _rms(transform, source, target, tree)
    history = [rms]
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):  # noqa: B007
        updated = _solve_similarity(src, tgt, config.rotation_mode)
        new_rms, new_src, new_tgt = _rms(updated, source, target, tree)
        if new_rms > rms:
            # re-matching can only help; a larger value here is floating-point noise
            break
        transform, src, tgt = updated, new_src, new_tgt
        history.append(new_rms)
        converged = rms - new_rms < config.tolerance
        rms = new_rms
        if converged:
            break
    return IcpResult(transform, rms, history, iterations, candidate)


def _initial_transform(source: np.ndarray, target: np.ndarray, yaw: float) -> SimilarityTransform:
    spread_src = math.sqrt(np.mean(np.sum(np.square(source - source.mean(axis=0)), axis=1)))
    spread_tgt = math.sqrt(np.mean(np.sum(np.square(target - target.mean(axis=0)), axis=1)))
    scale = spread_tgt / spread_src if spread_src > 0 else 1.0
    rotation = yaw_matrix(yaw)
    translation = target.mean(axis=0) - scale * rotation @ source.mean(axis=0)
    return SimilarityTransform(rotation, scale, translation)


def source_points(canonical: OccupancyGrid, config: IcpConfig) -> np.ndarray:
    """Canonical face points centered on the cube center, subsampled to at most max_source_points."""
    points = face_points(canonical).points - 0.5
    if len(points) > config.max_source_points:
        keep = numpy_rng(config.seed).choice(len(points), config.max_source_points, replace=False)
        points = points[np.sort(keep)]
    return points


def register_points(source: np.ndarray, target: np.ndarray, config: IcpConfig) -> IcpResult:
    """Best ICP result over uniformly spaced initial yaws."""
    best: IcpResult | None = None
    for candidate in range(config.yaw_candidates):
        yaw = 2 * math.pi * candidate / config.yaw_candidates
        try:
            result = icp(source, target, _initial_transform(source, target, yaw), config, candidate)
        except DegenerateCorrespondenceError:
            _LOGGER.debug("ICP candidate %d hit a degenerate correspondence set", candidate)
            continue
        _LOGGER.debug("ICP candidate %d: rms %.6f after %d iterations", candidate, result.rms, result.iterations)
        if best is None or result.rms < best.rms - _TIE_MARGIN:
            best = result
    if best is None:
        raise DegenerateCorrespondenceError("Every ICP candidate was degenerate")
    return best


def refine_with_moments(
    transform: SimilarityTransform,
    canonical: OccupancyGrid,
    region: OccupancyGrid,
) -> SimilarityTransform:
    """Keep the rotation; take scale and translation from the solid moments of both grids.

    The canonical moments are in canonical units, so their ratio to the region's moments is the
    squared scale whatever the rotation.
    """
    canonical_centroid, canonical_spread = solid_moments(canonical)
    region_centroid, region_spread = solid_moments(region)
    scale = math.sqrt(region_spread / canonical_spread)
    translation = region_centroid - scale * transform.rotation @ (canonical_centroid - 0.5)
    return SimilarityTransform(transform.rotation, scale, translation)


def fit_placement(
    canonical: OccupancyGrid,
    region: SparseVoxelSet,
    config: IcpConfig | None = None,
    *,
    object_id: str = "",
    class_name: str = "",
) -> Placement:
    """Recover the placement of `canonical` that best explains the voxels of `region`.

    ICP over the exposed voxel faces fixes the yaw. With `moment_refinement`, scale and translation
    are then re-estimated from the solid moments, which are exact for voxelizations on the grid.
    """
    config = config or IcpConfig()
    if not len(region):
        raise EmptyGridError("Cannot fit a placement to an empty region")
    if canonical.is_empty:
        raise EmptyGridError("Cannot fit an empty canonical object")

    source = source_points(canonical, config)
    region_grid = region.to_grid()
    target = face_points(region_grid).points
    best = register_points(source, target, config)

    diameter = region.diameter()
    if best.rms > diameter:
        raise RegistrationError(
            f"ICP diverged: best rms {best.rms:.4f} exceeds region diameter {diameter:.4f}",
            best=best,
        )

    transform, rms = best.transform, best.rms
    if config.moment_refinement:
        transform = refine_with_moments(transform, canonical, region_grid)
        rms, _, _ = _rms(transform, source, target, cKDTree(target))
        _LOGGER.debug("Moment refinement: scale %.4f -> %.4f", best.transform.scale, transform.scale)

    return Placement(
        object_id=object_id,
        class_name=class_name,
        translation=tuple(float(v) for v in transform.translation),  # type: ignore[arg-type]
        yaw=wrap_angle(transform.yaw),
        scale=float(transform.scale),
        rms_error=rms,
    )
