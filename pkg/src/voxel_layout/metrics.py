"""Physical plausibility and coherency scores of generated layouts.

Every score is a percentage in [0, 100]. PSA is reported under a per-object conjunction
convention: an object counts only when it is positioned and rotated correctly, collision free
and in bounds.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .const import BOOTSTRAP_RESAMPLES
from .exceptions import DataError
from .registration import Placement
from .utils import numpy_rng, wrap_angle

_LOGGER = logging.getLogger(__name__)

PSA_CONVENTION = "psa = 100 * mean(pos_ok and rot_ok and not colliding and in_bounds)"


@dataclass(frozen=True)
class OrientedBox:
    """Box rotated by `yaw` about its vertical center axis."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        """Validate extents."""
        if any(not e > 0 for e in self.half_extents):
            raise ValueError(f"Half extents must be positive, got {self.half_extents}")

    def axes(self) -> np.ndarray:
        """The two horizontal unit axes, shape (2, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, s], [-s, c]])

    def footprint(self) -> np.ndarray:
        """Horizontal corners, shape (4, 2)."""
        ex, ey, _ = self.half_extents
        axes = self.axes()
        signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        return np.asarray(self.center[:2]) + (signs[:, :1] * ex) * axes[0] + (signs[:, 1:] * ey) * axes[1]

    def corners(self) -> np.ndarray:
        """All eight corners, shape (8, 3)."""
        footprint = self.footprint()
        bottom, top = self.vertical_interval()
        return np.vstack(
            [np.column_stack([footprint, np.full(4, bottom)]), np.column_stack([footprint, np.full(4, top)])],
        )

    def vertical_interval(self) -> tuple[float, float]:
        """(bottom, top) heights."""
        return self.center[2] - self.half_extents[2], self.center[2] + self.half_extents[2]


@dataclass(frozen=True)
class Room:
    """Axis-aligned room bounds inside the unit cube."""

    lower: tuple[float, float, float] = (0.0, 0.0, 0.0)
    upper: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        """Validate the bounds."""
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper, strict=True)):
            raise ValueError(f"Room bounds are empty: {self.lower} .. {self.upper}")
        if min(self.lower) < 0 or max(self.upper) > 1:
            raise ValueError("Room bounds must lie inside the unit cube")

    def contains(self, points: np.ndarray, tolerance: float = 0.0) -> bool:
        """Whether every point lies within the bounds inflated by `tolerance`."""
        points = np.asarray(points, dtype=float)
        return bool(
            np.all(points >= np.asarray(self.lower) - tolerance)
            and np.all(points <= np.asarray(self.upper) + tolerance),
        )


@dataclass(frozen=True)
class ObjectFlags:
    """Per-object outcome of the checks."""

    object_id: str
    colliding: bool = False
    in_bounds: bool = True
    pos_ok: bool = True
    rot_ok: bool = True

    @property
    def correct(self) -> bool:
        """Whether the object passes every check."""
        return self.pos_ok and self.rot_ok and not self.colliding and self.in_bounds


@dataclass(frozen=True)
class ScoreReport:
    """Scores of one layout."""

    cf: float
    ib: float
    pos: float
    rot: float
    psa: float
    flags: list[ObjectFlags] = field(default_factory=list)
    seconds: float = 0.0

    def as_row(self, scene_id: str) -> dict[str, str | float]:
        """Flat row for the evaluation CSV."""
        return {
            "scene_id": scene_id,
            "cf": self.cf,
            "ib": self.ib,
            "pos": self.pos,
            "rot": self.rot,
            "psa": self.psa,
            "seconds": self.seconds,
        }


def box_from_placement(
    placement: Placement,
    lower: Sequence[float],
    upper: Sequence[float],
) -> OrientedBox:
    """World box of a class template whose canonical bounding box is lower..upper."""
    canonical_center = (np.asarray(lower, dtype=float) + np.asarray(upper, dtype=float)) / 2
    half = placement.scale * (np.asarray(upper, dtype=float) - np.asarray(lower, dtype=float)) / 2
    center = placement.apply(canonical_center[None])[0]
    return OrientedBox(tuple(center), tuple(half), placement.yaw)  # type: ignore[arg-type]


def _interval_overlap(a: np.ndarray, b: np.ndarray) -> float:
    return float(min(a.max(), b.max()) - max(a.min(), b.min()))


def penetration_depth(a: OrientedBox, b: OrientedBox) -> float:
    """Smallest overlap over the horizontal separating axes and the vertical axis.

    Non-positive values mean the boxes are separated (or only touching).
    """
    bottom_a, top_a = a.vertical_interval()
    bottom_b, top_b = b.vertical_interval()
    depth = min(top_a, top_b) - max(bottom_a, bottom_b)

    footprint_a, footprint_b = a.footprint(), b.footprint()
    for axis in np.vstack([a.axes(), b.axes()]):
        depth = min(depth, _interval_overlap(footprint_a @ axis, footprint_b @ axis))
        if depth <= 0:
            break
    return depth


def collision_flags(boxes: Sequence[OrientedBox], tolerance: float = 0.0) -> list[bool]:
    """Per box, whether it penetrates any other box deeper than `tolerance`."""
    colliding = [False] * len(boxes)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if penetration_depth(boxes[i], boxes[j]) > tolerance:
                colliding[i] = colliding[j] = True
    return colliding


def collision_free(boxes: Sequence[OrientedBox], tolerance: float = 0.0) -> tuple[float, list[bool]]:
    """CF score: percentage of objects in no collision, plus the colliding flags."""
    if not boxes:
        raise ValueError("Expected at least one object")
    flags = collision_flags(boxes, tolerance)
    return 100.0 * flags.count(False) / len(boxes), flags


def in_boundary(boxes: Sequence[OrientedBox], room: Room, tolerance: float = 0.0) -> tuple[float, list[bool]]:
    """IB score: percentage of objects whose corners all lie in the inflated room, plus the flags."""
    if not boxes:
        raise ValueError("Expected at least one object")
    flags = [room.contains(box.corners(), tolerance) for box in boxes]
    return 100.0 * flags.count(True) / len(boxes), flags


def yaw_error(a: float, b: float, symmetry_order: int = 1) -> float:
    """Absolute heading difference modulo the class's rotational symmetry."""
    period = 2 * math.pi / symmetry_order
    delta = wrap_angle(a - b)
    delta = (delta + period / 2) % period - period / 2
    return abs(delta)


def coherency(
    placements: Sequence[Placement],
    ground_truth: Mapping[str, Placement],
    symmetry_orders: Mapping[str, int],
    pos_threshold: float,
    yaw_threshold: float,
) -> tuple[float, float, list[bool], list[bool]]:
    """Positional and rotational agreement with ground truth; `yaw_threshold` is in radians."""
    if not placements:
        raise ValueError("Expected at least one placement")
    pos_flags, rot_flags = [], []
    for placement in placements:
        try:
            truth = ground_truth[placement.object_id]
        except KeyError as err:
            raise DataError(f"No ground truth for object {placement.object_id!r}") from err
        offset = np.asarray(placement.translation) - np.asarray(truth.translation)
        pos_flags.append(bool(np.linalg.norm(offset) <= pos_threshold))
        order = symmetry_orders.get(placement.class_name, 1)
        rot_flags.append(yaw_error(placement.yaw, truth.yaw, order) <= yaw_threshold)
    count = len(placements)
    return 100.0 * sum(pos_flags) / count, 100.0 * sum(rot_flags) / count, pos_flags, rot_flags


def psa(flags: Sequence[ObjectFlags]) -> float:
    """Percentage of objects passing every check."""
    if not flags:
        return 0.0
    return 100.0 * sum(flag.correct for flag in flags) / len(flags)


def score_layout(  # noqa: PLR0913
    placements: Sequence[Placement],
    boxes: Sequence[OrientedBox],
    room: Room,
    tolerance: float,
    *,
    ground_truth: Mapping[str, Placement] | None = None,
    symmetry_orders: Mapping[str, int] | None = None,
    pos_threshold: float = 0.05,
    yaw_threshold: float = math.radians(15.0),
    seconds: float = 0.0,
) -> ScoreReport:
    """Score a layout; without ground truth only CF and IB are meaningful and pos/rot report 100."""
    if len(placements) != len(boxes):
        raise ValueError("Expected one box per placement")
    cf, colliding = collision_free(boxes, tolerance)
    ib, inside = in_boundary(boxes, room, tolerance)
    if ground_truth is not None:
        pos, rot, pos_flags, rot_flags = coherency(
            placements,
            ground_truth,
            symmetry_orders or {},
            pos_threshold,
            yaw_threshold,
        )
    else:
        pos = rot = 100.0
        pos_flags = rot_flags = [True] * len(placements)

    flags = [
        ObjectFlags(p.object_id, colliding=c, in_bounds=i, pos_ok=po, rot_ok=ro)
        for p, c, i, po, ro in zip(placements, colliding, inside, pos_flags, rot_flags, strict=True)
    ]
    report = ScoreReport(cf, ib, pos, rot, psa(flags), flags, seconds)
    _LOGGER.debug("Scored %d objects: cf %.1f ib %.1f psa %.1f", len(placements), cf, ib, report.psa)
    return report


def bootstrap_interval(
    values: Sequence[float],
    resamples: int = BOOTSTRAP_RESAMPLES,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float, float]:
    """Mean and percentile bootstrap interval (mean, low, high)."""
    data = np.asarray(values, dtype=float)
    if not len(data):
        raise ValueError("Cannot bootstrap an empty sample")
    rng = numpy_rng(seed)
    means = data[rng.integers(0, len(data), size=(resamples, len(data)))].mean(axis=1)
    alpha = (1 - level) / 2
    low, high = np.quantile(means, [alpha, 1 - alpha])
    return float(data.mean()), float(low), float(high)


def summarize(reports: Sequence[ScoreReport], resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> dict:
    """JSON-ready summary: mean and bootstrap interval per score."""
    summary: dict = {"scenes": len(reports), "psa_convention": PSA_CONVENTION}
    for name in ("cf", "ib", "pos", "rot", "psa", "seconds"):
        mean, low, high = bootstrap_interval([getattr(r, name) for r in reports], resamples, seed)
        summary[name] = {"mean": mean, "ci95": [low, high]}
    return summary
