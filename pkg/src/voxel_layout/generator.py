"""Higher-level access to trained layout models."""

from __future__ import annotations

import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass

from typing_extensions import override

from . import config_names as cn
from .config import RunConfig
from .exceptions import ConfigError, OrderingError
from .files import CheckpointFile, Layout
from .flowmatch import FewStepSampler, GuidedSampler, NoiseSchedule, RenoiseMode
from .netcore import HashTextEmbedder, LayoutDenoiser
from .registration import Placement
from .rollout import (
    EditResult,
    LatentSampler,
    ObjectQueue,
    OrderPolicy,
    RolloutResult,
    RolloutState,
    edit_remove,
    generate,
    generate_diverse,
    make_entry,
    order_objects,
)
from .scenes import CATALOG, Catalog, SceneSpec
from .training import Stage
from .voxelgrid import PointCloud, surface_points

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationResult:
    """Layout plus the rollout that produced it."""

    layout: Layout
    rollout: RolloutResult

    def surface(self) -> PointCloud:
        """Surface points of the final occupancy, for PLY export."""
        return surface_points(self.rollout.state.occupancy)


@dataclass(frozen=True)
class RemovalResult:
    """Layout of the remaining objects plus the edited occupancy."""

    layout: Layout
    edit: EditResult
    seconds: float

    def surface(self) -> PointCloud:
        """Surface points of the edited occupancy."""
        return surface_points(self.edit.occupancy)


class LayoutGenerator(ABC):
    """Generates, completes and edits layouts with one trained model."""

    def __init__(
        self,
        model: LayoutDenoiser,
        config: RunConfig,
        checkpoint: CheckpointFile,
        catalog: Catalog = CATALOG,
    ) -> None:
        """DO NOT USE THIS CONSTRUCTOR DIRECTLY. Use create() method instead."""
        self.model = model
        self.config = config
        self.checkpoint = checkpoint
        self.catalog = catalog
        self.codec = config.codec()
        self.icp = config.icp_config()
        self.embedder = HashTextEmbedder.from_config(model.config)
        self.policy = OrderPolicy(config[cn.ROLLOUT_ORDER])

    @classmethod
    def create(cls, checkpoint: CheckpointFile, config: RunConfig, catalog: Catalog = CATALOG) -> LayoutGenerator:
        """Load the model of a checkpoint and bind it to the run configuration."""
        model = checkpoint.load_model().eval()
        if model.config.latent_channels != config[cn.CODEC_D]:
            raise ConfigError(
                f"Checkpoint has {model.config.latent_channels} latent channels, codec.d is {config[cn.CODEC_D]}",
            )
        return cls(model, config, checkpoint, catalog)

    @classmethod
    @abstractmethod
    def supports_checkpoint(cls, checkpoint: CheckpointFile) -> bool:
        """Check if this class supports the given checkpoint."""

    @abstractmethod
    def sampler(self) -> LatentSampler:
        """Latent sampler bound to the model."""

    @property
    def stage(self) -> Stage:
        """Stage of the loaded checkpoint."""
        return Stage(self.checkpoint.stage)

    @property
    def resolution(self) -> int:
        """Occupancy grid resolution."""
        return self.config.resolution

    def queue(self, objects: list[tuple[str, str]], instruction: str) -> ObjectQueue:
        """Order (object_id, class_name) pairs with the configured policy."""
        return order_objects(
            objects,
            self.policy,
            instruction=instruction,
            catalog=self.catalog,
            codec=self.codec,
            resolution=self.resolution,
        )

    def generate(self, spec: SceneSpec, seed: int | None = None) -> GenerationResult:
        """Lay out every object of `spec` in an empty room."""
        return self.generate_diverse(spec, 1, seed)[0]

    def generate_diverse(self, spec: SceneSpec, count: int, seed: int | None = None) -> list[GenerationResult]:
        """`count` layouts of the same scene with consecutive seeds."""
        seed = self.config[cn.SEED] if seed is None else seed
        queue = self.queue([(obj.object_id, obj.class_name) for obj in spec.objects], spec.instruction)
        c = self.embedder.embed(spec.instruction)
        initial = RolloutState.empty(self.resolution, self.codec)
        if count == 1:
            results = [generate(self.sampler(), initial, queue, c, seed=seed, icp=self.icp, codec=self.codec)]
        else:
            results = generate_diverse(
                self.sampler(),
                initial,
                queue,
                c,
                count,
                seed=seed,
                icp=self.icp,
                codec=self.codec,
            )
        return [GenerationResult(self.layout(spec, result.placements, result), result) for result in results]

    def complete(self, spec: SceneSpec, keep: int, seed: int | None = None) -> GenerationResult:
        """Keep the first `keep` ground-truth objects and generate the rest."""
        if not 0 <= keep < len(spec):
            raise OrderingError(f"Cannot keep {keep} of {len(spec)} objects and still have something to complete")
        seed = self.config[cn.SEED] if seed is None else seed
        kept = spec.objects[:keep]
        queue = self.queue([(obj.object_id, obj.class_name) for obj in spec.objects[keep:]], spec.instruction)
        c = self.embedder.embed(spec.instruction)
        initial = RolloutState.initial(spec.occupancy(keep), self.codec)
        result = generate(self.sampler(), initial, queue, c, seed=seed, icp=self.icp, codec=self.codec)
        placements = [obj.placement for obj in kept] + result.placements
        return GenerationResult(self.layout(spec, placements, result), result)

    def remove(self, spec: SceneSpec, object_id: str, seed: int | None = None) -> RemovalResult:
        """Remove one object from the ground-truth scene."""
        if self.stage != Stage.EDIT:
            raise ConfigError(f"Removal needs an edit checkpoint, got stage {self.stage}")
        seed = self.config[cn.SEED] if seed is None else seed
        try:
            obj = spec.object(object_id)
        except KeyError as err:
            raise OrderingError(f"Scene {spec.scene_id} has no object {object_id!r}") from err

        start = time.perf_counter()
        entry = make_entry(obj.object_id, obj.class_name, self.catalog, self.codec, self.resolution)
        edit = edit_remove(
            self.sampler(),
            spec.occupancy(),
            spec.object_grid(obj),
            entry,
            self.embedder.embed(spec.instruction),
            seed=seed,
            codec=self.codec,
        )
        seconds = time.perf_counter() - start
        remaining = [other.placement for other in spec.objects if other.object_id != object_id]
        layout = Layout(spec.scene_id, self.resolution, spec.instruction, tuple(remaining), seconds, edit.evaluations)
        _LOGGER.info("Removed %s from %s in %.2fs", object_id, spec.scene_id, seconds)
        return RemovalResult(layout, edit, seconds)

    def layout(self, spec: SceneSpec, placements: list[Placement], result: RolloutResult) -> Layout:
        """Layout document of a rollout."""
        return Layout(
            spec.scene_id,
            self.resolution,
            spec.instruction,
            tuple(placements),
            result.seconds,
            result.evaluations,
        )

    def layout_json(self, result: GenerationResult) -> dict:
        """JSON document of a generated layout."""
        return result.layout.to_dict()


class TeacherLayoutGenerator(LayoutGenerator):
    """Many-step guided sampling with the teacher or removal model."""

    @classmethod
    @override
    def supports_checkpoint(cls, checkpoint: CheckpointFile) -> bool:
        return checkpoint.stage in (Stage.TEACHER, Stage.EDIT)

    @override
    def sampler(self) -> LatentSampler:
        return GuidedSampler(self.model, self.config.sampler_config())


class StudentLayoutGenerator(LayoutGenerator):
    """Few-step unguided sampling with the distilled student."""

    @classmethod
    @override
    def supports_checkpoint(cls, checkpoint: CheckpointFile) -> bool:
        return checkpoint.stage == Stage.STUDENT

    @override
    def sampler(self) -> LatentSampler:
        return FewStepSampler(
            self.model,
            NoiseSchedule.uniform(self.config[cn.DISTILL_T]),
            RenoiseMode(self.config[cn.DISTILL_RENOISE]),
        )


GENERATOR_CLASSES: list[type[LayoutGenerator]] = [TeacherLayoutGenerator, StudentLayoutGenerator]


def create_generator(checkpoint: CheckpointFile, config: RunConfig, catalog: Catalog = CATALOG) -> LayoutGenerator:
    """Create the generator matching the checkpoint's stage."""
    for candidate_class in GENERATOR_CLASSES:
        if candidate_class.supports_checkpoint(checkpoint):
            return candidate_class.create(checkpoint, config, catalog)

    raise ConfigError(f"Unsupported checkpoint stage '{checkpoint.stage}'")
