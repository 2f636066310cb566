"""Procedural ground-truth scenes: furniture catalog, relational placement and training pairs.

Scenes live on a lattice of SCENE_LATTICE world units. A template's coordinates are multiples of
1/`lattice` inside the canonical unit cube and each such step spans one scene lattice step once
placed, so every object has a fixed scale. Yaws are quarter turns and bounding boxes start on
lattice points, which keeps every part on whole codec patches at the default resolution. Each
template stands on z=0 and turns its back (local +y) toward the wall it leans against.
"""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import IntEnum, StrEnum
from typing import NamedTuple

import backoff
import numpy as np

from .const import (
    DEFAULT_RESOLUTION,
    SCENE_LATTICE,
    SCENE_MAX_OBJECTS,
    SCENE_MIN_OBJECTS,
    SCENE_REJECTION_BUDGET,
    TEST_SEED_START,
    TRAIN_SEED_START,
    VAL_SEED_START,
)
from .exceptions import SceneGenerationError
from .metrics import OrientedBox, Room, box_from_placement, collision_free, in_boundary, penetration_depth
from .registration import Placement
from .utils import numpy_rng, wrap_angle
from .voxelgrid import GEOMETRY_EPS, Cuboid, Frame, OccupancyGrid, voxelize

_LOGGER = logging.getLogger(__name__)

# touching boxes report rounding noise as overlap
CONTACT_TOLERANCE = 1e-9
OBJECT_ATTEMPTS = 50

QUARTER_TURNS = (0.0, math.pi / 2, math.pi, -math.pi / 2)
# horizontal unit directions, indexed like the room walls
_DIRECTIONS = ((0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0))


class Support(IntEnum):
    """What an object stands on; the value is its bottom-up level."""

    FLOOR = 0
    SURFACE = 1

    def __str__(self):
        """Return the lowercase name."""
        return self.name.lower()


class Relation(StrEnum):
    """Placement rule relating an object to the room or an anchor object."""

    AGAINST_WALL = "against-wall"
    AROUND = "around"
    ON_TOP_OF = "on-top-of"
    FACING = "facing"
    FREE = "free"


class Split(StrEnum):
    """Dataset split with a disjoint seed range."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    @property
    def seed_start(self) -> int:
        """First seed of the split."""
        return {Split.TRAIN: TRAIN_SEED_START, Split.VAL: VAL_SEED_START, Split.TEST: TEST_SEED_START}[self]


def _box(lower: tuple[float, float, float], upper: tuple[float, float, float]) -> Cuboid:
    return Cuboid.from_bounds(lower, upper)


def _legs(height: float, width: float = 0.25) -> tuple[Cuboid, ...]:
    lo, hi = 0.0, 1.0 - width
    return tuple(_box((x, y, 0.0), (x + width, y + width, height)) for x in (lo, hi) for y in (lo, hi))


@dataclass(frozen=True)
class ObjectClass:
    """Furniture class: compound-cuboid template plus placement metadata."""

    name: str
    parts: tuple[Cuboid, ...]
    support: Support = Support.FLOOR
    symmetry: int = 1
    lattice: int = 2

    def __post_init__(self):
        """Validate the template."""
        if 4 % self.symmetry:
            raise ValueError(f"Symmetry order {self.symmetry} of {self.name} does not divide 4")
        corners = np.vstack([part.corners() for part in self.parts])
        if corners.min() < 0 or corners.max() > 1:
            raise ValueError(f"Template of {self.name} exceeds the canonical cube")
        steps = corners * self.lattice
        if not np.allclose(steps, np.round(steps), rtol=0.0, atol=GEOMETRY_EPS):
            raise ValueError(f"Template of {self.name} is not on a 1/{self.lattice} lattice")
        if self.scale > 1:
            raise ValueError(f"{self.name} with lattice {self.lattice} does not fit the scene cube")

    @property
    def scale(self) -> float:
        """World size of the canonical unit cube."""
        return self.lattice * SCENE_LATTICE

    def bounds(self) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
        """Canonical axis-aligned bounding box (lower, upper)."""
        corners = np.vstack([part.corners() for part in self.parts])
        return tuple(corners.min(axis=0)), tuple(corners.max(axis=0))  # type: ignore[return-value]

    def canonical_grid(self, resolution: int = DEFAULT_RESOLUTION) -> OccupancyGrid:
        """Voxelization of the template in its canonical frame."""
        return voxelize(self.parts, resolution, Frame.CANONICAL)

    def world_parts(self, placement: Placement) -> list[Cuboid]:
        """Template cuboids moved into the scene."""
        parts = []
        for part in self.parts:
            center = placement.apply(np.asarray(part.center)[None])[0]
            half = tuple(placement.scale * h for h in part.half_extents)
            parts.append(Cuboid(tuple(center), half, wrap_angle(part.yaw + placement.yaw)))  # type: ignore[arg-type]
        return parts

    def placed_grid(self, placement: Placement, resolution: int = DEFAULT_RESOLUTION) -> OccupancyGrid:
        """Voxelization of the placed object in the scene frame."""
        return voxelize(self.world_parts(placement), resolution)

    def box(self, placement: Placement) -> OrientedBox:
        """World bounding box of the placed object."""
        return box_from_placement(placement, *self.bounds())


class Catalog(Mapping[str, ObjectClass]):
    """Immutable set of object classes with cached canonical grids."""

    def __init__(self, classes: Sequence[ObjectClass]):
        """Create Catalog."""
        self._classes = {cls.name: cls for cls in classes}
        self._grids: dict[tuple[str, int], OccupancyGrid] = {}

    def __getitem__(self, name: str) -> ObjectClass:
        """Look up a class by name."""
        return self._classes[name]

    def __iter__(self) -> Iterator[str]:
        """Iterate class names in declaration order."""
        return iter(self._classes)

    def __len__(self) -> int:
        """Number of classes."""
        return len(self._classes)

    def canonical_grid(self, name: str, resolution: int = DEFAULT_RESOLUTION) -> OccupancyGrid:
        """Cached canonical voxelization of a class."""
        key = (name, resolution)
        if key not in self._grids:
            self._grids[key] = self[name].canonical_grid(resolution)
        return self._grids[key]

    def symmetry_orders(self) -> dict[str, int]:
        """Yaw symmetry order per class."""
        return {name: cls.symmetry for name, cls in self._classes.items()}

    def support_levels(self) -> dict[str, int]:
        """Bottom-up level per class."""
        return {name: int(cls.support) for name, cls in self._classes.items()}


def gen_assets() -> Catalog:
    """Build the furniture catalog."""
    return Catalog(
        [
            ObjectClass(
                "bed",
                (_box((0.0, 0.0, 0.0), (1.0, 1.0, 0.25)), _box((0.0, 0.75, 0.25), (1.0, 1.0, 0.75))),
                lattice=4,
            ),
            ObjectClass(
                "table",
                (_box((0.0, 0.0, 0.5), (1.0, 1.0, 0.75)), *_legs(0.5)),
                symmetry=4,
                lattice=4,
            ),
            ObjectClass(
                "chair",
                (_box((0.0, 0.0, 0.0), (1.0, 1.0, 0.5)), _box((0.0, 0.5, 0.5), (1.0, 1.0, 1.0))),
                lattice=2,
            ),
            ObjectClass(
                "sofa",
                (
                    _box((0.0, 0.25, 0.0), (1.0, 1.0, 0.25)),
                    _box((0.0, 0.75, 0.25), (1.0, 1.0, 0.5)),
                    _box((0.0, 0.25, 0.25), (0.25, 0.75, 0.5)),
                    _box((0.75, 0.25, 0.25), (1.0, 0.75, 0.5)),
                ),
                lattice=4,
            ),
            ObjectClass(
                "shelf",
                (
                    _box((0.0, 0.75, 0.0), (1.0, 1.0, 1.0)),
                    _box((0.0, 0.5, 0.0), (0.25, 0.75, 1.0)),
                    _box((0.75, 0.5, 0.0), (1.0, 0.75, 1.0)),
                    _box((0.25, 0.5, 0.0), (0.75, 0.75, 0.25)),
                    _box((0.25, 0.5, 0.5), (0.75, 0.75, 0.75)),
                ),
                lattice=4,
            ),
            ObjectClass(
                "lamp",
                (_box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),),
                support=Support.SURFACE,
                symmetry=4,
                lattice=1,
            ),
            ObjectClass(
                "desk",
                (
                    _box((0.0, 0.25, 0.5), (1.0, 0.75, 0.75)),
                    _box((0.0, 0.25, 0.0), (0.25, 0.75, 0.5)),
                    _box((0.75, 0.25, 0.0), (1.0, 0.75, 0.5)),
                ),
                symmetry=2,
                lattice=4,
            ),
            ObjectClass(
                "rug",
                (_box((0.0, 0.25, 0.0), (1.0, 0.75, 0.25)),),
                symmetry=2,
                lattice=4,
            ),
            ObjectClass(
                "nightstand",
                (_box((0.0, 0.0, 0.0), (1.0, 1.0, 0.5)),),
                symmetry=4,
                lattice=2,
            ),
        ],
    )


CATALOG = gen_assets()


class RecipeItem(NamedTuple):
    """How many objects of a class a room type gets and how they are placed."""

    class_name: str
    relation: Relation
    anchor: str | None
    count: tuple[int, int]


ROOM_RECIPES: dict[str, tuple[RecipeItem, ...]] = {
    "bedroom": (
        RecipeItem("bed", Relation.AGAINST_WALL, None, (1, 1)),
        RecipeItem("nightstand", Relation.AGAINST_WALL, None, (1, 2)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "nightstand", (1, 2)),
        RecipeItem("shelf", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "shelf", (0, 1)),
        RecipeItem("desk", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("chair", Relation.AROUND, "desk", (0, 1)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "desk", (0, 1)),
        RecipeItem("rug", Relation.FREE, None, (0, 1)),
    ),
    "living room": (
        RecipeItem("table", Relation.FREE, None, (1, 1)),
        RecipeItem("sofa", Relation.FACING, "table", (1, 1)),
        RecipeItem("chair", Relation.AROUND, "table", (1, 3)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "table", (1, 2)),
        RecipeItem("shelf", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "shelf", (0, 1)),
        RecipeItem("nightstand", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "nightstand", (0, 1)),
    ),
    "study": (
        RecipeItem("desk", Relation.AGAINST_WALL, None, (1, 1)),
        RecipeItem("chair", Relation.AROUND, "desk", (1, 1)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "desk", (1, 2)),
        RecipeItem("shelf", Relation.AGAINST_WALL, None, (1, 2)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "shelf", (0, 2)),
        RecipeItem("sofa", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("nightstand", Relation.AGAINST_WALL, None, (0, 1)),
    ),
    "dining room": (
        RecipeItem("table", Relation.FREE, None, (1, 1)),
        RecipeItem("chair", Relation.AROUND, "table", (2, 4)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "table", (1, 2)),
        RecipeItem("shelf", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("nightstand", Relation.AGAINST_WALL, None, (0, 1)),
        RecipeItem("lamp", Relation.ON_TOP_OF, "nightstand", (0, 1)),
    ),
}

ROOM_TYPES = tuple(ROOM_RECIPES)


@dataclass(frozen=True)
class SceneObject:
    """One ground-truth object of a scene."""

    object_id: str
    class_name: str
    placement: Placement
    relation: Relation = Relation.FREE
    anchor_id: str | None = None

    def phrase(self, anchor_class: str | None) -> str:
        """Instruction fragment describing this object."""
        if self.relation == Relation.AGAINST_WALL:
            return f"a {self.class_name} against the wall"
        if self.relation == Relation.AROUND:
            return f"a {self.class_name} around the {anchor_class}"
        if self.relation == Relation.ON_TOP_OF:
            return f"a {self.class_name} on the {anchor_class}"
        if self.relation == Relation.FACING:
            return f"a {self.class_name} facing the {anchor_class}"
        return f"a {self.class_name}"


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth scene, objects listed bottom-up."""

    scene_id: str
    seed: int
    room_type: str
    room: Room
    objects: tuple[SceneObject, ...]
    instruction: str
    resolution: int = DEFAULT_RESOLUTION
    catalog: Catalog = field(default=CATALOG, repr=False, compare=False)

    def __len__(self) -> int:
        """Number of objects."""
        return len(self.objects)

    def object(self, object_id: str) -> SceneObject:
        """Look up an object by id."""
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(object_id)

    def placements(self) -> list[Placement]:
        """Ground-truth placements in queue order."""
        return [obj.placement for obj in self.objects]

    def ground_truth(self) -> dict[str, Placement]:
        """Placements keyed by object id."""
        return {obj.object_id: obj.placement for obj in self.objects}

    def object_grid(self, obj: SceneObject) -> OccupancyGrid:
        """Voxelization of one placed object."""
        return self.catalog[obj.class_name].placed_grid(obj.placement, self.resolution)

    def occupancy(self, count: int | None = None, exclude: str | None = None) -> OccupancyGrid:
        """Scene occupancy after placing the first `count` objects, optionally skipping one id."""
        objects = self.objects if count is None else self.objects[:count]
        parts: list[Cuboid] = []
        for obj in objects:
            if obj.object_id != exclude:
                parts.extend(self.catalog[obj.class_name].world_parts(obj.placement))
        return voxelize(parts, self.resolution)

    def boxes(self) -> list[OrientedBox]:
        """World bounding boxes in queue order."""
        return [self.catalog[obj.class_name].box(obj.placement) for obj in self.objects]


class TrainingPair(NamedTuple):
    """Context occupancy, object and target occupancy of one autoregressive step."""

    context: OccupancyGrid
    canonical: OccupancyGrid
    target: OccupancyGrid
    object_id: str
    class_name: str
    instruction: str
    order_index: int


class PlacementRejected(Exception):  # noqa: N818
    """A sampled object violated a placement constraint."""


def _yaw_facing_away(direction: Sequence[float]) -> float:
    """Yaw that turns local +y along `direction` (horizontal)."""
    return wrap_angle(math.atan2(-direction[0], direction[1]))


def _snap(value: float) -> float:
    return SCENE_LATTICE * round(value / SCENE_LATTICE)


def _bounds(box: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
    corners = box.corners()
    return corners.min(axis=0), corners.max(axis=0)


class _SceneBuilder:
    """Places objects one at a time with per-object rejection."""

    def __init__(self, catalog: Catalog, rng: np.random.Generator, room: Room, resolution: int):
        self.catalog = catalog
        self.rng = rng
        self.room = room
        self.resolution = resolution
        self.objects: list[SceneObject] = []
        self.boxes: list[OrientedBox] = []
        self._counts: dict[str, int] = {}

    def anchor(self, class_name: str) -> int | None:
        """Index of the most recently placed object of a class."""
        for index in range(len(self.objects) - 1, -1, -1):
            if self.objects[index].class_name == class_name:
                return index
        return None

    def add(self, class_name: str, relation: Relation, anchor_index: int | None = None) -> None:
        """Place one object or raise PlacementRejected."""
        cls = self.catalog[class_name]
        for _ in range(OBJECT_ATTEMPTS):
            placement = self._propose(cls, relation, anchor_index)
            if placement is not None and self._accept(cls, placement):
                break
        else:
            raise PlacementRejected(f"Could not place {class_name} ({relation})")
        self._append(cls, placement, relation, anchor_index)

    def place_at(
        self,
        class_name: str,
        lower: Sequence[float],
        relation: Relation = Relation.FREE,
        anchor_index: int | None = None,
    ) -> bool:
        """Place an unrotated object with its bounding box starting at `lower`, if it fits."""
        cls = self.catalog[class_name]
        placement = self._at(cls, 0.0, lower)
        if placement is None or not self._accept(cls, placement):
            return False
        self._append(cls, placement, relation, anchor_index)
        return True

    def _append(self, cls: ObjectClass, placement: Placement, relation: Relation, anchor_index: int | None):
        index = self._counts.get(cls.name, 0)
        self._counts[cls.name] = index + 1
        anchor_id = None if anchor_index is None else self.objects[anchor_index].object_id
        self.objects.append(SceneObject(f"{cls.name}_{index}", cls.name, placement, relation, anchor_id))
        self.boxes.append(cls.box(placement))

    def _accept(self, cls: ObjectClass, placement: Placement) -> bool:
        box = cls.box(placement)
        if not self.room.contains(box.corners(), CONTACT_TOLERANCE):
            return False
        if any(penetration_depth(box, other) > CONTACT_TOLERANCE for other in self.boxes):
            return False
        return not cls.placed_grid(placement, self.resolution).is_empty

    def _turn(self) -> float:
        return QUARTER_TURNS[int(self.rng.integers(len(QUARTER_TURNS)))]

    def _lattice_point(self, low: float, high: float) -> float | None:
        """Random lattice coordinate in [low, high], None if the interval is empty."""
        steps = math.floor((high - low) / SCENE_LATTICE + 1e-6)
        if steps < 0:
            return None
        return low + SCENE_LATTICE * int(self.rng.integers(steps + 1))

    @staticmethod
    def _extent(obj_class: ObjectClass, yaw: float) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box of the class turned by `yaw`, relative to its translation."""
        return _bounds(obj_class.box(Placement("", obj_class.name, (0.0, 0.0, 0.0), yaw, obj_class.scale)))

    def _at(self, cls: ObjectClass, yaw: float, lower: Sequence[float | None]) -> Placement | None:
        """Placement whose bounding box starts at the lattice point nearest `lower`."""
        if any(value is None for value in lower):
            return None
        offset, _ = self._extent(cls, yaw)
        half = 0.5 * cls.scale
        # the canonical cube has the same corner for every quarter turn
        corner = np.asarray(lower, dtype=float) - offset - half
        translation = tuple(_snap(float(value)) + half for value in corner)
        return Placement("", cls.name, translation, yaw, cls.scale)  # type: ignore[arg-type]

    def _propose(  # noqa: PLR0911
        self,
        cls: ObjectClass,
        relation: Relation,
        anchor_index: int | None,
    ) -> Placement | None:
        lower, upper = np.asarray(self.room.lower), np.asarray(self.room.upper)
        anchor = None if anchor_index is None else _bounds(self.boxes[anchor_index])

        if relation == Relation.ON_TOP_OF and anchor is not None:
            yaw = self._turn()
            size = np.subtract(*self._extent(cls, yaw)[::-1])
            xy = [self._lattice_point(anchor[0][a], anchor[1][a] - size[a]) for a in (0, 1)]
            return self._at(cls, yaw, (*xy, anchor[1][2]))

        if relation == Relation.AGAINST_WALL:
            normal = _DIRECTIONS[int(self.rng.integers(4))]
            yaw = _yaw_facing_away(normal)
            size = np.subtract(*self._extent(cls, yaw)[::-1])
            corner = [self._lattice_point(lower[a], upper[a] - size[a]) for a in (0, 1)]
            axis = 0 if normal[0] else 1
            corner[axis] = upper[axis] - size[axis] if normal[axis] > 0 else lower[axis]
            return self._at(cls, yaw, (*corner, lower[2]))

        if relation in (Relation.AROUND, Relation.FACING) and anchor is not None:
            direction = _DIRECTIONS[int(self.rng.integers(4))]
            axis = 0 if direction[0] else 1
            side = 1 - axis
            corner = [None, None]
            if relation == Relation.AROUND:
                # back away from the anchor, so the front faces it
                yaw = _yaw_facing_away(direction)
                size = np.subtract(*self._extent(cls, yaw)[::-1])
                gap = SCENE_LATTICE * int(self.rng.integers(2))
                if direction[axis] > 0:
                    corner[axis] = anchor[1][axis] + gap
                else:
                    corner[axis] = anchor[0][axis] - gap - size[axis]
                low, high = sorted((anchor[0][side], anchor[1][side] - size[side]))
            else:
                # on the far side of `direction`, front pointing along it
                yaw = _yaw_facing_away((-direction[0], -direction[1]))
                size = np.subtract(*self._extent(cls, yaw)[::-1])
                if direction[axis] > 0:
                    corner[axis] = self._lattice_point(lower[axis], anchor[0][axis] - size[axis])
                else:
                    corner[axis] = self._lattice_point(anchor[1][axis], upper[axis] - size[axis])
                low = max(lower[side], anchor[0][side] - size[side] + SCENE_LATTICE)
                high = min(upper[side] - size[side], anchor[1][side] - SCENE_LATTICE)
            corner[side] = self._lattice_point(low, high)
            return self._at(cls, yaw, (*corner, lower[2]))

        if relation == Relation.FREE or anchor is None:
            yaw = self._turn()
            size = np.subtract(*self._extent(cls, yaw)[::-1])
            corner = [self._lattice_point(lower[a], upper[a] - size[a]) for a in (0, 1)]
            return self._at(cls, yaw, (*corner, lower[2]))
        return None

    def finish(self, room_type: str, scene_id: str, seed: int) -> SceneSpec:
        """Freeze the placed objects into a bottom-up SceneSpec."""
        phrases = []
        for obj in self.objects:
            anchor_class = None if obj.anchor_id is None else obj.anchor_id.rsplit("_", 1)[0]
            phrases.append(obj.phrase(anchor_class))
        instruction = f"a {room_type} with " + ", ".join(phrases)

        ordered = sorted(self.objects, key=lambda obj: (int(self.catalog[obj.class_name].support), obj.class_name))
        objects = tuple(
            SceneObject(
                obj.object_id,
                obj.class_name,
                _with_id(obj.placement, obj.object_id),
                obj.relation,
                obj.anchor_id,
            )
            for obj in ordered
        )
        spec = SceneSpec(scene_id, seed, room_type, self.room, objects, instruction, self.resolution, self.catalog)

        cf, _ = collision_free(spec.boxes(), CONTACT_TOLERANCE)
        ib, _ = in_boundary(spec.boxes(), self.room, CONTACT_TOLERANCE)
        if cf != 100.0 or ib != 100.0:  # noqa: PLR2004
            raise PlacementRejected(f"Scene failed verification: cf {cf}, ib {ib}")
        return spec


def _with_id(placement: Placement, object_id: str) -> Placement:
    return Placement(object_id, placement.class_name, placement.translation, placement.yaw, placement.scale)


def _sample_room(rng: np.random.Generator) -> Room:
    margin_x, margin_y = rng.choice([0.0, SCENE_LATTICE], size=2)
    return Room((float(margin_x), float(margin_y), 0.0), (1.0 - float(margin_x), 1.0 - float(margin_y), 1.0))


def _retrying(seed: int, budget: int):
    def give_up(details):
        raise SceneGenerationError(
            f"Scene with seed {seed} exhausted its rejection budget after {details['tries']} attempts",
            seed=seed,
            attempts=details["tries"],
        )

    return backoff.on_exception(
        backoff.constant,
        PlacementRejected,
        interval=0,
        max_tries=budget,
        jitter=None,
        logger=None,
        on_giveup=give_up,
    )


def scene_id(split: Split | str, seed: int) -> str:
    """Stable id of a scene."""
    return f"{Split(split)}-{seed:06d}"


def gen_scene(  # noqa: PLR0913
    seed: int,
    catalog: Catalog = CATALOG,
    *,
    resolution: int = DEFAULT_RESOLUTION,
    split: Split | str = Split.TRAIN,
    room_type: str | None = None,
    max_objects: int = SCENE_MAX_OBJECTS,
    budget: int = SCENE_REJECTION_BUDGET,
) -> SceneSpec:
    """Sample a collision-free, in-boundary scene deterministically from `seed`."""
    rng = numpy_rng(seed)
    if room_type is None:
        room_type = ROOM_TYPES[int(rng.integers(len(ROOM_TYPES)))]
    recipe = ROOM_RECIPES[room_type]
    room = _sample_room(rng)

    @_retrying(seed, budget)
    def attempt() -> SceneSpec:
        builder = _SceneBuilder(catalog, rng, room, resolution)
        for item in recipe:
            for _ in range(int(rng.integers(item.count[0], item.count[1] + 1))):
                if len(builder.objects) >= max_objects:
                    break
                anchor = None if item.anchor is None else builder.anchor(item.anchor)
                if item.anchor is not None and anchor is None:
                    break
                builder.add(item.class_name, item.relation, anchor)
        if len(builder.objects) < SCENE_MIN_OBJECTS:
            raise PlacementRejected(f"Only {len(builder.objects)} objects placed")
        return builder.finish(room_type, scene_id(split, seed), seed)

    spec = attempt()
    _LOGGER.debug("Generated %s: %s with %d objects", spec.scene_id, room_type, len(spec))
    return spec


def gen_long_scene(
    seed: int,
    n_objects: int = 20,
    catalog: Catalog = CATALOG,
    *,
    resolution: int = DEFAULT_RESOLUTION,
    budget: int = SCENE_REJECTION_BUDGET,
) -> SceneSpec:
    """Dining-hall scene with at least `n_objects` objects, beyond the usual per-room cap.

    A table with a lamp comes first, then nightstands with a lamp each fill the free slots of a
    nightstand-sized lattice in random order.
    """
    rng = numpy_rng(seed)
    room = Room()
    step = catalog["nightstand"].scale
    slots = [(x * step, y * step) for x in range(round(1 / step)) for y in range(round(1 / step))]
    table_slots = [slot for slot in slots if max(slot) + catalog["table"].scale <= 1]
    capacity = 2 + 2 * (len(slots) - round(catalog["table"].scale / step) ** 2)
    if n_objects > capacity:
        raise SceneGenerationError(f"A long scene holds at most {capacity} objects, got {n_objects}", seed=seed)

    @_retrying(seed, budget)
    def attempt() -> SceneSpec:
        builder = _SceneBuilder(catalog, rng, room, resolution)
        builder.place_at("table", (*table_slots[int(rng.integers(len(table_slots)))], 0.0))
        builder.add("lamp", Relation.ON_TOP_OF, 0)
        for index in rng.permutation(len(slots)):
            if len(builder.objects) >= n_objects:
                break
            if builder.place_at("nightstand", (*slots[index], 0.0)):
                builder.add("lamp", Relation.ON_TOP_OF, len(builder.objects) - 1)
        return builder.finish("dining hall", f"long-{seed:06d}", seed)

    return attempt()


def split_seeds(split: Split | str, count: int) -> range:
    """Seeds of the first `count` scenes of a split."""
    start = Split(split).seed_start
    return range(start, start + count)


def build_training_pairs(spec: SceneSpec, *, removal: bool = False) -> list[TrainingPair]:
    """Teacher-forcing pairs over the bottom-up object sequence.

    Forward pairs map S_{i-1} to S_i; removal pairs swap context and target.
    """
    states = [spec.occupancy(count) for count in range(len(spec) + 1)]
    pairs = []
    for index, obj in enumerate(spec.objects, start=1):
        context, target = states[index - 1], states[index]
        if removal:
            context, target = target, context
        pairs.append(
            TrainingPair(
                context=context,
                canonical=spec.catalog.canonical_grid(obj.class_name, spec.resolution),
                target=target,
                object_id=obj.object_id,
                class_name=obj.class_name,
                instruction=spec.instruction,
                order_index=index,
            ),
        )
    return pairs


def mentioned_classes(instruction: str, class_names: Sequence[str]) -> dict[str, int]:
    """Character offset of the first whole-word mention of each class."""
    mentions = {}
    for name in class_names:
        match = re.search(rf"\b{re.escape(name)}\b", instruction.lower())
        if match is not None:
            mentions[name] = match.start()
    return mentions
