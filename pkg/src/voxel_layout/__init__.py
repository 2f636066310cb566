"""Autoregressive 3D layout generation in voxel space."""

from . import config_names, const
from .config import CONFIG_KEYS, RunConfig
from .distill import DistillConfig, TeacherBundle, distill_iteration, dual_guidance_step
from .exceptions import (
    ConfigError,
    DataError,
    DecodeError,
    DegenerateCorrespondenceError,
    EditError,
    EmptyGridError,
    EncodeError,
    GeometryError,
    NumericalError,
    OrderingError,
    OutOfBoundsError,
    RegistrationError,
    ResolutionMismatchError,
    RolloutError,
    SamplerError,
    SceneGenerationError,
    ShapeMismatchError,
    VoxelLayoutException,
)
from .files import CheckpointFile, LatentFile, Layout, OccupancyFile
from .flowmatch import FewStepSampler, GuidedSampler, NoiseSchedule, SamplerConfig
from .generator import LayoutGenerator, StudentLayoutGenerator, TeacherLayoutGenerator, create_generator
from .latentcodec import LatentGrid, PatchCodec
from .netcore import HashTextEmbedder, LayoutDenoiser, ModelConfig
from .registration import IcpConfig, Placement, fit_placement
from .rollout import ObjectQueue, RolloutState, generate, order_objects
from .scenes import CATALOG, SceneSpec, gen_scene
from .training import Stage, distill_run, train_stage
from .voxelgrid import OccupancyGrid, PointCloud, SparseVoxelSet

__all__ = [
    "CATALOG",
    "CONFIG_KEYS",
    "CheckpointFile",
    "ConfigError",
    "DataError",
    "DecodeError",
    "DegenerateCorrespondenceError",
    "DistillConfig",
    "EditError",
    "EmptyGridError",
    "EncodeError",
    "FewStepSampler",
    "GeometryError",
    "GuidedSampler",
    "HashTextEmbedder",
    "IcpConfig",
    "LatentFile",
    "LatentGrid",
    "Layout",
    "LayoutDenoiser",
    "LayoutGenerator",
    "ModelConfig",
    "NoiseSchedule",
    "NumericalError",
    "ObjectQueue",
    "OccupancyFile",
    "OccupancyGrid",
    "OrderingError",
    "OutOfBoundsError",
    "PatchCodec",
    "Placement",
    "PointCloud",
    "RegistrationError",
    "ResolutionMismatchError",
    "RolloutError",
    "RolloutState",
    "RunConfig",
    "SamplerConfig",
    "SamplerError",
    "SceneGenerationError",
    "SceneSpec",
    "ShapeMismatchError",
    "SparseVoxelSet",
    "Stage",
    "StudentLayoutGenerator",
    "TeacherBundle",
    "TeacherLayoutGenerator",
    "VoxelLayoutException",
    "config_names",
    "const",
    "create_generator",
    "distill_iteration",
    "distill_run",
    "dual_guidance_step",
    "fit_placement",
    "gen_scene",
    "generate",
    "order_objects",
    "train_stage",
]
