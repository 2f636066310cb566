"""Training stages: base, autoregressive teacher, removal model and distilled student."""

from __future__ import annotations

import functools
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import torch
from torch import nn
from tqdm import tqdm

from . import config_names as cn
from .config import RunConfig
from .distill import DistillScene, TeacherBundle, distill_iteration, make_optimizers
from .exceptions import ConfigError, DataError, NumericalError
from .files import CheckpointFile, CsvLog, DatasetLayout, save_checkpoint
from .flowmatch import FlowLossResult, TrainingSample, fm_loss, fm_loss_uncond
from .latentcodec import LatentGrid, PatchCodec
from .netcore import ConditionEmbedding, HashTextEmbedder, LayoutDenoiser, parameter_count
from .scenes import SceneSpec, Split, build_training_pairs
from .utils import derive_seed, torch_generator
from .voxelgrid import OccupancyGrid

_LOGGER = logging.getLogger(__name__)

TRAIN_COLUMNS = ("step", "loss", "dropped", "grad_norm", "wall_ms")
DISTILL_COLUMNS = ("step", "loss_step", "loss_holistic", "critic_loss", "grad_norm", "wall_ms")


class Stage(StrEnum):
    """Training stage a checkpoint comes from."""

    BASE = "base"
    TEACHER = "teacher"
    EDIT = "edit"
    STUDENT = "student"


@dataclass
class TrainResult:
    """Outcome of one training run."""

    model: nn.Module
    stage: Stage
    losses: list[float] = field(default_factory=list)
    log_path: Path | None = None
    checkpoint_path: Path | None = None


@dataclass
class DistillRunResult:
    """Outcome of a distillation run."""

    student: nn.Module
    rows: list[dict[str, float]] = field(default_factory=list)
    checksums_before: tuple[str, str] = ("", "")
    checksums_after: tuple[str, str] = ("", "")
    log_path: Path | None = None
    checkpoint_path: Path | None = None


class TrainingData:
    """Lazily encoded training examples of a scene list."""

    def __init__(self, scenes: Sequence[SceneSpec], codec: PatchCodec, embedder: HashTextEmbedder):
        """Create TrainingData."""
        if not scenes:
            raise DataError("No training scenes")
        self.scenes = list(scenes)
        self.codec = codec
        self.embedder = embedder
        self.pair_index = [(scene, obj) for scene, spec in enumerate(self.scenes) for obj in range(len(spec))]
        self._pairs = functools.lru_cache(maxsize=64)(self._build_pairs)

    def _build_pairs(self, scene: int, removal: bool) -> list[TrainingSample]:  # noqa: FBT001
        spec = self.scenes[scene]
        c = self.embedder.embed(spec.instruction)
        encode = self.codec.encode
        return [
            TrainingSample(encode(pair.target), encode(pair.context), encode(pair.canonical), c)
            for pair in build_training_pairs(spec, removal=removal)
        ]

    def scene_sample(self, scene: int) -> tuple[LatentGrid, ConditionEmbedding]:
        """(full-scene latent, instruction) for the text-only stage."""
        spec = self.scenes[scene]
        return self.codec.encode(spec.occupancy()), self.embedder.embed(spec.instruction)

    def pair_sample(self, index: int, *, removal: bool = False) -> TrainingSample:
        """One forward (or removal) pair."""
        scene, obj = self.pair_index[index]
        return self._pairs(scene, removal)[obj]

    def distill_scene(self, scene: int, objects: int = 0) -> DistillScene:
        """Conditioning of a self-rollout over the scene's first `objects` objects (0 = all)."""
        spec = self.scenes[scene]
        chosen = spec.objects if objects <= 0 else spec.objects[:objects]
        return DistillScene(
            initial=self.codec.encode(OccupancyGrid.empty(spec.resolution)),
            objects=[self.codec.encode(spec.catalog.canonical_grid(obj.class_name, spec.resolution)) for obj in chosen],
            instruction=self.embedder.embed(spec.instruction),
            resolution=spec.resolution,
        )


def load_scenes(
    config: RunConfig,
    dataset_root: Path | str | None = None,
    split: Split = Split.TRAIN,
) -> list[SceneSpec]:
    """Scenes of one split of a generated dataset."""
    scenes = DatasetLayout(dataset_root or config.data_dir).load_split(str(split))
    if not scenes:
        raise DataError(f"Split {split} of the dataset is empty")
    mismatched = [spec.scene_id for spec in scenes if spec.resolution != config.resolution]
    if mismatched:
        raise DataError(f"Scenes {mismatched[:5]} were generated at another grid resolution than {config.resolution}")
    return scenes


def _stage_loss(stage: Stage, model: nn.Module, data: TrainingData, indices: list[int], generator, drop_rate: float):
    if stage == Stage.BASE:
        return fm_loss_uncond(model, [data.scene_sample(i) for i in indices], generator, drop_rate)
    removal = stage == Stage.EDIT
    return fm_loss(model, [data.pair_sample(i, removal=removal) for i in indices], generator, drop_rate)


def _initial_model(config: RunConfig, stage: Stage, init: CheckpointFile | None) -> LayoutDenoiser:
    if stage == Stage.BASE:
        return LayoutDenoiser(config.model_config()) if init is None else init.load_model()
    if init is None:
        raise ConfigError(f"Stage {stage} starts from a base checkpoint, none was given")
    if init.stage != Stage.BASE:
        raise ConfigError(f"Stage {stage} starts from a base checkpoint, got stage {init.stage}")
    return init.load_model()


def train_stage(  # noqa: PLR0913
    config: RunConfig,
    stage: Stage | str,
    dataset_root: Path | str | None = None,
    init: CheckpointFile | None = None,
    out_dir: Path | str | None = None,
    scenes: Sequence[SceneSpec] | None = None,
) -> TrainResult:
    """Train the base, teacher or edit denoiser with the flow-matching objective.

    The CSV log and checkpoint are written when `out_dir` is given.
    """
    stage = Stage(stage)
    if stage == Stage.STUDENT:
        raise ConfigError("The student is trained by distill_run")

    model = _initial_model(config, stage, init)
    model.train()
    data = TrainingData(
        scenes if scenes is not None else load_scenes(config, dataset_root),
        config.codec(),
        HashTextEmbedder.from_config(model.config),
    )
    population = len(data.scenes) if stage == Stage.BASE else len(data.pair_index)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config[cn.TRAIN_LR],
        weight_decay=config[cn.TRAIN_WEIGHT_DECAY],
    )
    generator = torch_generator(derive_seed(config[cn.SEED], "train", str(stage)))
    steps = config[cn.TRAIN_STEPS]
    batch_size = config[cn.TRAIN_BATCH_SIZE]
    log_every = config[cn.TRAIN_LOG_EVERY]
    drop_rate = config[cn.FLOW_DROP_RATE]

    _LOGGER.info(
        "Training stage %s: %d parameters, %d examples, %d steps",
        stage,
        parameter_count(model),
        population,
        steps,
    )
    result = TrainResult(model, stage)
    log_path = Path(out_dir) / f"{stage}.csv" if out_dir is not None else None
    dropped_total = 0

    with CsvLog(log_path, TRAIN_COLUMNS) if log_path else _NullLog() as log:
        for step in tqdm(range(steps), desc=f"train {stage}", disable=not _LOGGER.isEnabledFor(logging.INFO)):
            start = time.perf_counter()
            indices = torch.randint(population, (batch_size,), generator=generator).tolist()
            try:
                loss: FlowLossResult = _stage_loss(stage, model, data, indices, generator, drop_rate)
            except NumericalError as err:
                raise NumericalError(f"Step {step}: {err}", operation=err.operation, step=step) from err
            if not torch.isfinite(loss.loss):
                raise NumericalError(f"Non-finite {stage} loss at step {step}", operation="train_stage", step=step)

            optimizer.zero_grad(set_to_none=True)
            loss.loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), float("inf")))
            if not math.isfinite(grad_norm):
                raise NumericalError(f"Non-finite gradient at step {step}", operation="train_stage", step=step)
            optimizer.step()

            value = float(loss.loss.detach())
            dropped_total += loss.dropped
            result.losses.append(value)
            log.write(
                {
                    "step": step,
                    "loss": value,
                    "dropped": loss.dropped,
                    "grad_norm": grad_norm,
                    "wall_ms": 1000 * (time.perf_counter() - start),
                },
            )
            if step % log_every == 0:
                _LOGGER.info("%s step %d: loss %.5f, %d conditions dropped so far", stage, step, value, dropped_total)

    model.eval()
    _LOGGER.info("Stage %s dropped %d of %d conditions", stage, dropped_total, steps * batch_size)
    if out_dir is not None:
        result.log_path = log_path
        checkpoint = Path(out_dir) / f"{stage}.ckpt"
        result.checkpoint_path = save_checkpoint(checkpoint, model, str(stage), config.as_strings())
    return result


def distill_run(  # noqa: PLR0913
    config: RunConfig,
    base: CheckpointFile,
    teacher: CheckpointFile,
    dataset_root: Path | str | None = None,
    out_dir: Path | str | None = None,
    scenes: Sequence[SceneSpec] | None = None,
) -> DistillRunResult:
    """Distill the teacher into a few-step student under holistic and step-wise guidance."""
    if base.stage != Stage.BASE:
        raise ConfigError(f"Expected a base checkpoint, got stage {base.stage}")
    if teacher.stage != Stage.TEACHER:
        raise ConfigError(f"Expected a teacher checkpoint, got stage {teacher.stage}")

    distill_config = config.distill_config()
    teachers = TeacherBundle.create(base.load_model(), teacher.load_model())
    student = teacher.load_model().train()
    optimizers = make_optimizers(student, teachers.critic, distill_config)
    data = TrainingData(
        scenes if scenes is not None else load_scenes(config, dataset_root),
        config.codec(),
        HashTextEmbedder.from_config(student.config),
    )
    generator = torch_generator(derive_seed(config[cn.SEED], "distill"))
    steps = config[cn.DISTILL_STEPS]
    log_every = config[cn.TRAIN_LOG_EVERY]

    result = DistillRunResult(student, checksums_before=teachers.teacher_checksums())
    _LOGGER.info(
        "Distilling for %d steps: T=%d, ratio 1:%d, step loss %s, holistic loss %s",
        steps,
        distill_config.student_steps,
        distill_config.ratio,
        distill_config.use_step_loss,
        distill_config.use_holistic_loss,
    )
    log_path = Path(out_dir) / "distill.csv" if out_dir is not None else None

    with CsvLog(log_path, DISTILL_COLUMNS) if log_path else _NullLog() as log:
        for step in tqdm(range(steps), desc="distill", disable=not _LOGGER.isEnabledFor(logging.INFO)):
            start = time.perf_counter()
            index = int(torch.randint(len(data.scenes), (1,), generator=generator))
            scene = data.distill_scene(index, distill_config.objects)
            try:
                update, critic_loss = distill_iteration(
                    student,
                    teachers,
                    optimizers,
                    scene,
                    distill_config,
                    generator,
                    data.codec,
                )
            except NumericalError as err:
                raise NumericalError(f"Distillation step {step}: {err}", operation=err.operation, step=step) from err
            row = {
                "step": step,
                "loss_step": update.loss_step,
                "loss_holistic": update.loss_holistic,
                "critic_loss": critic_loss,
                "grad_norm": update.grad_norm,
                "wall_ms": 1000 * (time.perf_counter() - start),
            }
            result.rows.append(row)
            log.write(row)
            if step % log_every == 0:
                _LOGGER.info(
                    "distill step %d: step loss %.5f, holistic loss %.5f, critic loss %.5f (%d critic updates)",
                    step,
                    update.loss_step,
                    update.loss_holistic,
                    critic_loss,
                    distill_config.ratio,
                )

    result.checksums_after = teachers.teacher_checksums()
    if result.checksums_after != result.checksums_before:
        raise NumericalError("Teacher parameters changed during distillation", operation="distill_run")
    student.eval()
    if out_dir is not None:
        result.log_path = log_path
        result.checkpoint_path = save_checkpoint(
            Path(out_dir) / "student.ckpt",
            student,
            str(Stage.STUDENT),
            config.as_strings(),
        )
    return result


class _NullLog:
    """Stand-in for CsvLog when no output directory is given."""

    def __enter__(self) -> _NullLog:
        return self

    def __exit__(self, *args) -> None:
        return None

    def write(self, row) -> None:
        """Discard a row."""
