"""Autoregressive layout generation, completion and removal.

Each step samples the next scene latent from the current one and the next object, snaps it back
onto the codec's grid (latent <- encode(decode(latent))) and recovers the object's placement
from the voxels the step added.
"""

from __future__ import annotations

import itertools
import logging
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import NamedTuple, Protocol

import numpy as np

from .const import DEFAULT_RESOLUTION
from .exceptions import EditError, NumericalError, OrderingError, RolloutError, VoxelLayoutException
from .flowmatch import SampleResult
from .latentcodec import DEFAULT_CODEC, LatentGrid, PatchCodec
from .netcore import ConditionEmbedding
from .registration import IcpConfig, Placement, fit_placement
from .scenes import CATALOG, Catalog, mentioned_classes
from .utils import derive_seed
from .voxelgrid import OccupancyGrid, SparseVoxelSet, grid_difference

_LOGGER = logging.getLogger(__name__)


class OrderPolicy(StrEnum):
    """How an unordered object set becomes a queue."""

    BOTTOM_UP = "bottom-up"
    INSTRUCTION_ORDER = "instruction-order"


class ContextMode(StrEnum):
    """Which scene state conditions the next step."""

    SELF_ROLLOUT = "self-rollout"
    TEACHER_FORCING = "teacher-forcing"


class LatentSampler(Protocol):
    """Samples a scene latent given scene, object and instruction."""

    def __call__(self, s: LatentGrid, o: LatentGrid, c: ConditionEmbedding, seed: int) -> SampleResult:
        """Sample one latent."""
        ...


class QueueEntry(NamedTuple):
    """An object waiting to be placed."""

    object_id: str
    class_name: str
    canonical: OccupancyGrid
    latent: LatentGrid


@dataclass(frozen=True)
class ObjectQueue:
    """Ordered objects; each latent is the codec encoding of its canonical grid."""

    entries: tuple[QueueEntry, ...] = ()

    def __len__(self) -> int:
        """Queue length."""
        return len(self.entries)

    def __iter__(self):
        """Iterate entries in placement order."""
        return iter(self.entries)

    def __getitem__(self, index: int) -> QueueEntry:
        """Entry at a position."""
        return self.entries[index]

    def class_names(self) -> list[str]:
        """Class names in placement order."""
        return [entry.class_name for entry in self.entries]


def make_entry(
    object_id: str,
    class_name: str,
    catalog: Catalog = CATALOG,
    codec: PatchCodec = DEFAULT_CODEC,
    resolution: int = DEFAULT_RESOLUTION,
) -> QueueEntry:
    """Queue entry with the canonical grid and latent of a catalog class."""
    try:
        canonical = catalog.canonical_grid(class_name, resolution)
    except KeyError as err:
        raise OrderingError(f"Unknown object class {class_name!r}") from err
    return QueueEntry(object_id, class_name, canonical, codec.encode(canonical))


def order_objects(  # noqa: PLR0913
    objects: Iterable[tuple[str, str]],
    policy: OrderPolicy | str = OrderPolicy.BOTTOM_UP,
    *,
    instruction: str | None = None,
    catalog: Catalog = CATALOG,
    codec: PatchCodec = DEFAULT_CODEC,
    resolution: int = DEFAULT_RESOLUTION,
) -> ObjectQueue:
    """Order (object_id, class_name) pairs into a queue.

    Bottom-up sorts by support level, then class name; instruction order follows the first mention
    of each class in the instruction. Ties keep the input order.
    """
    items = list(objects)
    if not items:
        raise OrderingError("Cannot order an empty object set")

    policy = OrderPolicy(policy)
    if policy == OrderPolicy.BOTTOM_UP:
        levels = catalog.support_levels()
        unknown = sorted({name for _, name in items if name not in levels})
        if unknown:
            raise OrderingError(f"No support level for classes {unknown}")
        ordered = sorted(items, key=lambda item: (levels[item[1]], item[1]))
    else:
        if not instruction:
            raise OrderingError("Instruction order needs an instruction")
        mentions = mentioned_classes(instruction, sorted({name for _, name in items}))
        missing = sorted({name for _, name in items if name not in mentions})
        if missing:
            raise OrderingError(f"Classes {missing} are not mentioned in the instruction")
        ordered = sorted(items, key=lambda item: mentions[item[1]])

    return ObjectQueue(tuple(make_entry(oid, name, catalog, codec, resolution) for oid, name in ordered))


@dataclass(frozen=True)
class RolloutState:
    """Scene after `index` placements."""

    index: int
    latent: LatentGrid
    occupancy: OccupancyGrid
    history: tuple[LatentGrid, ...] = ()

    @classmethod
    def initial(cls, occupancy: OccupancyGrid, codec: PatchCodec = DEFAULT_CODEC) -> RolloutState:
        """Starting state from a (possibly empty) scene occupancy."""
        return cls(0, codec.encode(occupancy), occupancy)

    @classmethod
    def empty(cls, resolution: int = DEFAULT_RESOLUTION, codec: PatchCodec = DEFAULT_CODEC) -> RolloutState:
        """Starting state of an empty room."""
        return cls.initial(OccupancyGrid.empty(resolution), codec)


@dataclass
class RolloutResult:
    """Final state, recovered placements and cost of a rollout."""

    state: RolloutState
    placements: list[Placement]
    evaluations: int = 0
    seconds: float = 0.0
    seed: int = 0
    step_regions: list[SparseVoxelSet] = field(default_factory=list)


def step(  # noqa: PLR0913
    sampler: LatentSampler,
    state: RolloutState,
    entry: QueueEntry,
    c: ConditionEmbedding,
    seed: int,
    codec: PatchCodec = DEFAULT_CODEC,
) -> tuple[RolloutState, SampleResult]:
    """Place one object: sample S_i from (S_{i-1}, o_i, c) and snap it to the codec grid."""
    index = state.index + 1
    if entry.latent.values.shape != state.latent.values.shape:
        raise RolloutError(
            f"Object latent {tuple(entry.latent.values.shape)} does not match scene latent "
            f"{tuple(state.latent.values.shape)}",
            index=index,
            state=state,
        )
    try:
        result = sampler(state.latent, entry.latent, c, derive_seed(seed, index))
    except NumericalError as err:
        raise RolloutError(f"Sampling failed at rollout step {index}: {err}", index=index, state=state) from err

    latent, occupancy = codec.round_trip(result.latent, state.occupancy.resolution)
    _LOGGER.debug("Rollout step %d (%s): %d voxels", index, entry.object_id, occupancy.occupied_count)
    return RolloutState(index, latent, occupancy, (*state.history, latent)), result


def generate(  # noqa: PLR0913
    sampler: LatentSampler,
    initial: RolloutState,
    queue: ObjectQueue,
    c: ConditionEmbedding,
    *,
    seed: int = 0,
    icp: IcpConfig | None = None,
    codec: PatchCodec = DEFAULT_CODEC,
    mode: ContextMode = ContextMode.SELF_ROLLOUT,
    reference: Sequence[OccupancyGrid] | None = None,
) -> RolloutResult:
    """Fold `step` over the queue and recover one placement per object.

    In teacher-forcing mode `reference[i]` is the ground-truth occupancy after i placements and
    replaces the generated state as context for the next step.
    """
    if not len(queue):
        raise OrderingError("Cannot roll out an empty object queue")
    if mode == ContextMode.TEACHER_FORCING and (reference is None or len(reference) < len(queue)):
        raise ValueError("Teacher forcing needs a reference occupancy for every step")

    icp = icp or IcpConfig()
    state = initial
    placements: list[Placement] = []
    regions: list[SparseVoxelSet] = []
    evaluations = 0
    start = time.perf_counter()

    for entry in queue:
        context = state
        if mode == ContextMode.TEACHER_FORCING and reference is not None:
            truth = reference[state.index]
            context = RolloutState(state.index, codec.encode(truth), truth, state.history)
        try:
            state, result = step(sampler, context, entry, c, seed, codec)
            evaluations += result.evaluations
            region = grid_difference(state.occupancy, context.occupancy)
            placements.append(
                fit_placement(entry.canonical, region, icp, object_id=entry.object_id, class_name=entry.class_name),
            )
            regions.append(region)
        except VoxelLayoutException as err:
            index = err.index if isinstance(err, RolloutError) and err.index else context.index + 1
            _LOGGER.exception("Rollout aborted at step %d (%s)", index, entry.object_id)
            raise RolloutError(
                f"Rollout failed at step {index} ({entry.object_id}): {err}",
                index=index,
                placements=placements,
                state=state,
            ) from err

    seconds = time.perf_counter() - start
    _LOGGER.info("Placed %d objects with %d model evaluations in %.2fs", len(placements), evaluations, seconds)
    return RolloutResult(state, placements, evaluations, seconds, seed, regions)


def complete(  # noqa: PLR0913
    sampler: LatentSampler,
    partial: OccupancyGrid,
    queue: ObjectQueue,
    c: ConditionEmbedding,
    *,
    seed: int = 0,
    icp: IcpConfig | None = None,
    codec: PatchCodec = DEFAULT_CODEC,
) -> RolloutResult:
    """Place the remaining objects into a partially furnished scene."""
    if not len(queue):
        raise OrderingError("Nothing left to complete: the object queue is empty")
    return generate(sampler, RolloutState.initial(partial, codec), queue, c, seed=seed, icp=icp, codec=codec)


@dataclass
class EditResult:
    """Scene after removing an object."""

    latent: LatentGrid
    occupancy: OccupancyGrid
    removed: SparseVoxelSet
    evaluations: int


def edit_remove(  # noqa: PLR0913
    sampler: LatentSampler,
    scene: OccupancyGrid,
    target: OccupancyGrid,
    entry: QueueEntry,
    c: ConditionEmbedding,
    *,
    seed: int = 0,
    codec: PatchCodec = DEFAULT_CODEC,
) -> EditResult:
    """Remove the object whose placed voxels are `target` using a removal-trained sampler."""
    if target.intersection(scene).is_empty:
        raise EditError(f"Object {entry.object_id} does not overlap the scene")
    state = RolloutState.initial(scene, codec)
    try:
        result = sampler(state.latent, entry.latent, c, derive_seed(seed, "remove", entry.object_id))
    except NumericalError as err:
        raise RolloutError(f"Removal of {entry.object_id} failed: {err}", index=1, state=state) from err
    latent, occupancy = codec.round_trip(result.latent, scene.resolution)
    removed = grid_difference(scene, occupancy)
    _LOGGER.debug("Removed %s: %d voxels cleared", entry.object_id, len(removed))
    return EditResult(latent, occupancy, removed, result.evaluations)


def generate_diverse(  # noqa: PLR0913
    sampler: LatentSampler,
    initial: RolloutState,
    queue: ObjectQueue,
    c: ConditionEmbedding,
    count: int,
    *,
    seed: int = 0,
    icp: IcpConfig | None = None,
    codec: PatchCodec = DEFAULT_CODEC,
) -> list[RolloutResult]:
    """`count` rollouts of the same instruction with seeds seed, seed+1, ..."""
    if count < 1:
        raise ValueError("count must be at least 1")
    results = [
        generate(sampler, initial, queue, c, seed=seed + offset, icp=icp, codec=codec) for offset in range(count)
    ]
    _LOGGER.info("Diversity over %d rollouts: %.4f", count, placement_diversity(results))
    return results


def placement_diversity(results: Sequence[RolloutResult]) -> float:
    """Mean over rollout pairs of the mean translation distance between same-id objects."""
    distances = []
    for first, second in itertools.combinations(results, 2):
        other: Mapping[str, Placement] = {p.object_id: p for p in second.placements}
        shared = [(p, other[p.object_id]) for p in first.placements if p.object_id in other]
        if shared:
            distances.append(
                float(np.mean([np.linalg.norm(np.subtract(a.translation, b.translation)) for a, b in shared])),
            )
    return float(np.mean(distances)) if distances else 0.0
