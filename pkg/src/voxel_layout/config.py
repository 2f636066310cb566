"""Typed run configuration.

A run configuration is a flat text file of `key = value` lines; `#` starts a comment. Every key is
declared in CONFIG_KEYS with its type, default and valid range.
"""

from __future__ import annotations

import logging
import math
import os
from collections.abc import Iterator, Mapping
from pathlib import Path
from typing import Any, Generic, TypeVar

from typing_extensions import override

import voxel_layout.config_names as cn
from voxel_layout.distill import DistillConfig
from voxel_layout.exceptions import ConfigError
from voxel_layout.flowmatch import NoiseSchedule, RenoiseMode, SamplerConfig
from voxel_layout.latentcodec import PatchCodec
from voxel_layout.netcore import ModelConfig
from voxel_layout.registration import IcpConfig, RotationMode
from voxel_layout.rollout import OrderPolicy

_LOGGER = logging.getLogger(__name__)

DATA_DIR_ENV = "LVG_DATA_DIR"

T = TypeVar("T")


class ConfigKey(Generic[T]):
    """Base class for configuration key definitions."""

    def __init__(self, default: T, description: str = ""):
        """Create ConfigKey."""
        self.default = default
        self.description = description

    def decode(self, text: str) -> T:
        """Parse the text form of a value."""
        raise NotImplementedError

    def encode(self, value: T) -> str:
        """Text form of a value."""
        return str(value)

    def validate(self, value: Any) -> T:
        """Check a typed value; text is decoded first."""
        if isinstance(value, str):
            return self.decode(value)
        return value


class IntKey(ConfigKey[int]):
    """Integer key with an inclusive range."""

    def __init__(self, default: int, minimum: int | None = None, maximum: int | None = None, description: str = ""):
        """Create IntKey."""
        super().__init__(default, description)
        self.minimum = minimum
        self.maximum = maximum

    @override
    def decode(self, text: str) -> int:
        try:
            value = int(text.strip())
        except ValueError as err:
            raise ConfigError(f"Expected an integer, got {text!r}") from err
        return self.validate(value)

    @override
    def validate(self, value: Any) -> int:
        if isinstance(value, str):
            return self.decode(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Expected an integer, got {value!r}")
        if self.minimum is not None and value < self.minimum:
            raise ConfigError(f"Value {value} is below the minimum {self.minimum}")
        if self.maximum is not None and value > self.maximum:
            raise ConfigError(f"Value {value} is above the maximum {self.maximum}")
        return value


class FloatKey(ConfigKey[float]):
    """Finite real key with an inclusive range."""

    def __init__(
        self,
        default: float,
        minimum: float | None = None,
        maximum: float | None = None,
        description: str = "",
    ):
        """Create FloatKey."""
        super().__init__(default, description)
        self.minimum = minimum
        self.maximum = maximum

    @override
    def decode(self, text: str) -> float:
        try:
            value = float(text.strip())
        except ValueError as err:
            raise ConfigError(f"Expected a number, got {text!r}") from err
        return self.validate(value)

    @override
    def validate(self, value: Any) -> float:
        if isinstance(value, str):
            return self.decode(value)
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"Expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"Value {value} is not finite")
        if self.minimum is not None and value < self.minimum:
            raise ConfigError(f"Value {value} is below the minimum {self.minimum}")
        if self.maximum is not None and value > self.maximum:
            raise ConfigError(f"Value {value} is above the maximum {self.maximum}")
        return value

    @override
    def encode(self, value: float) -> str:
        return repr(float(value))


class BoolKey(ConfigKey[bool]):
    """Boolean key written as true/false."""

    @override
    def decode(self, text: str) -> bool:
        lowered = text.strip().lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ConfigError(f"Expected true or false, got {text!r}")

    @override
    def validate(self, value: Any) -> bool:
        if isinstance(value, str):
            return self.decode(value)
        if not isinstance(value, bool):
            raise ConfigError(f"Expected a boolean, got {value!r}")
        return value

    @override
    def encode(self, value: bool) -> str:
        return "true" if value else "false"


class StrKey(ConfigKey[str]):
    """Free text key."""

    @override
    def decode(self, text: str) -> str:
        return text.strip()


class ChoiceKey(ConfigKey[str]):
    """Text key restricted to a set of choices."""

    def __init__(self, default: str, choices: tuple[str, ...], description: str = ""):
        """Create ChoiceKey."""
        super().__init__(default, description)
        self.choices = choices

    @override
    def decode(self, text: str) -> str:
        value = text.strip()
        if value not in self.choices:
            raise ConfigError(f"Expected one of {', '.join(self.choices)}, got {value!r}")
        return value

    @override
    def validate(self, value: Any) -> str:
        return self.decode(str(value))


CONFIG_KEYS: dict[str, ConfigKey] = {
    cn.SEED: IntKey(0, 0),
    cn.PATHS_DATA: StrKey("data"),
    cn.PATHS_OUT: StrKey("runs"),
    cn.GRID_RESOLUTION: IntKey(16, 2, 64),
    cn.CODEC_PATCH: IntKey(2, 1),
    cn.CODEC_D: IntKey(8, 1),
    cn.CODEC_THRESHOLD: FloatKey(0.0, -1.0, 1.0),
    cn.MODEL_WIDTH: IntKey(64, 8),
    cn.MODEL_LAYERS: IntKey(4, 1),
    cn.MODEL_HEADS: IntKey(4, 1),
    cn.MODEL_VOCAB: IntKey(4096, 1),
    cn.MODEL_MAX_TEXT_TOKENS: IntKey(16, 1),
    cn.MODEL_TEXT_DIM: IntKey(64, 1),
    cn.MODEL_IDENTITY_AWARE: BoolKey(True),  # noqa: FBT003
    cn.FLOW_CFG_WEIGHT: FloatKey(3.0, 0.0),
    cn.FLOW_NUM_STEPS: IntKey(50, 1),
    cn.FLOW_DROP_RATE: FloatKey(0.1, 0.0, 1.0),
    cn.TRAIN_STEPS: IntKey(2000, 0),
    cn.TRAIN_BATCH_SIZE: IntKey(8, 1),
    cn.TRAIN_LR: FloatKey(1e-4, 0.0),
    cn.TRAIN_WEIGHT_DECAY: FloatKey(0.0, 0.0),
    cn.TRAIN_LOG_EVERY: IntKey(50, 1),
    cn.DISTILL_T: IntKey(4, 1),
    cn.DISTILL_STEPS: IntKey(100, 0),
    cn.DISTILL_OBJECTS: IntKey(0, 0),
    cn.DISTILL_LR_STUDENT: FloatKey(2e-6, 0.0),
    cn.DISTILL_LR_CRITIC: FloatKey(5e-7, 0.0),
    cn.DISTILL_BETA1: FloatKey(0.0, 0.0, 1.0),
    cn.DISTILL_BETA2: FloatKey(0.999, 0.0, 1.0),
    cn.DISTILL_WEIGHT_DECAY: FloatKey(0.01, 0.0),
    cn.DISTILL_RATIO: IntKey(5, 1),
    cn.DISTILL_CFG_WEIGHT: FloatKey(3.0, 0.0),
    cn.DISTILL_STEP_LOSS: BoolKey(True),  # noqa: FBT003
    cn.DISTILL_HOLISTIC_LOSS: BoolKey(True),  # noqa: FBT003
    cn.DISTILL_RENOISE: ChoiceKey(RenoiseMode.FRESH.value, tuple(m.value for m in RenoiseMode)),
    cn.ICP_MAX_ITERATIONS: IntKey(50, 1),
    cn.ICP_TOLERANCE: FloatKey(1e-6, 0.0),
    cn.ICP_YAW_CANDIDATES: IntKey(8, 1),
    cn.ICP_ROTATION_MODE: ChoiceKey(RotationMode.YAW.value, tuple(m.value for m in RotationMode)),
    cn.ICP_MAX_SOURCE_POINTS: IntKey(512, 3),
    cn.ICP_MOMENT_REFINEMENT: BoolKey(True),  # noqa: FBT003
    cn.METRICS_TAU: FloatKey(1.0, 0.0),
    cn.METRICS_POS_THRESHOLD: FloatKey(0.05, 0.0),
    cn.METRICS_YAW_THRESHOLD: FloatKey(15.0, 0.0, 180.0),
    cn.METRICS_MIN_OBJECTS: IntKey(8, 1),
    cn.METRICS_MAX_OBJECTS: IntKey(10, 1),
    cn.METRICS_BOOTSTRAP: IntKey(1000, 1),
    cn.DATA_TRAIN: IntKey(1024, 0),
    cn.DATA_VAL: IntKey(64, 0),
    cn.DATA_TEST: IntKey(128, 0),
    cn.ROLLOUT_ORDER: ChoiceKey(OrderPolicy.BOTTOM_UP.value, tuple(p.value for p in OrderPolicy)),
    cn.ROLLOUT_DIVERSITY: IntKey(1, 1),
}


def _definition(key: str) -> ConfigKey:
    try:
        return CONFIG_KEYS[key]
    except KeyError as err:
        raise ConfigError(f"Unknown configuration key {key!r}") from err


class RunConfig(Mapping[str, Any]):
    """Immutable, fully resolved run configuration."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        """Create RunConfig from defaults plus `values`."""
        resolved = {key: definition.default for key, definition in CONFIG_KEYS.items()}
        for key, value in (values or {}).items():
            try:
                resolved[key] = _definition(key).validate(value)
            except ConfigError as err:
                raise ConfigError(f"{key}: {err}") from err
        self._values = resolved
        self._check()

    def _check(self) -> None:
        resolution = self[cn.GRID_RESOLUTION]
        if resolution % self[cn.CODEC_PATCH]:
            raise ConfigError(f"grid.resolution {resolution} is not divisible by codec.patch {self[cn.CODEC_PATCH]}")
        if self[cn.METRICS_MIN_OBJECTS] > self[cn.METRICS_MAX_OBJECTS]:
            raise ConfigError("metrics.min_objects exceeds metrics.max_objects")

    @classmethod
    def defaults(cls) -> RunConfig:
        """Configuration with every default."""
        return cls()

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        """Parse `key = value` lines."""
        values: dict[str, str] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"Line {number}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            _definition(key)
            values[key] = value
        return cls(values)

    @classmethod
    def load(cls, path: Path | str | None = None, env: Mapping[str, str] | None = None) -> RunConfig:
        """Load a configuration file (or the defaults) and apply the environment overrides."""
        config = cls.parse(Path(path).read_text(encoding="utf-8")) if path is not None else cls()
        env = os.environ if env is None else env
        if env.get(DATA_DIR_ENV):
            _LOGGER.debug("Using %s=%s as data directory", DATA_DIR_ENV, env[DATA_DIR_ENV])
            config = config.with_overrides({cn.PATHS_DATA: env[DATA_DIR_ENV]})
        return config

    def with_overrides(self, values: Mapping[str, Any]) -> RunConfig:
        """Copy with some keys replaced."""
        return RunConfig({**self._values, **values})

    def dumps(self) -> str:
        """Resolved configuration, one sorted `key = value` line per key."""
        return "".join(f"{key} = {CONFIG_KEYS[key].encode(self._values[key])}\n" for key in sorted(self._values))

    def as_strings(self) -> dict[str, str]:
        """Encoded values keyed by name."""
        return {key: CONFIG_KEYS[key].encode(value) for key, value in self._values.items()}

    def __getitem__(self, key: str) -> Any:
        """Value of a key."""
        _definition(key)
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        """Iterate key names."""
        return iter(self._values)

    def __len__(self) -> int:
        """Number of keys."""
        return len(self._values)

    @property
    def resolution(self) -> int:
        """Occupancy grid resolution G."""
        return self[cn.GRID_RESOLUTION]

    @property
    def data_dir(self) -> Path:
        """Dataset root."""
        return Path(self[cn.PATHS_DATA])

    @property
    def out_dir(self) -> Path:
        """Output root."""
        return Path(self[cn.PATHS_OUT])

    @property
    def tolerance(self) -> float:
        """Collision and boundary tolerance in world units."""
        return self[cn.METRICS_TAU] / self.resolution

    @property
    def yaw_threshold(self) -> float:
        """Rotational coherency threshold in radians."""
        return math.radians(self[cn.METRICS_YAW_THRESHOLD])

    def codec(self) -> PatchCodec:
        """Latent codec."""
        return PatchCodec(self[cn.CODEC_PATCH], self[cn.CODEC_D], self[cn.CODEC_THRESHOLD])

    def model_config(self) -> ModelConfig:
        """Denoiser hyperparameters."""
        return ModelConfig(
            latent_channels=self[cn.CODEC_D],
            width=self[cn.MODEL_WIDTH],
            layers=self[cn.MODEL_LAYERS],
            heads=self[cn.MODEL_HEADS],
            vocab=self[cn.MODEL_VOCAB],
            max_text_tokens=self[cn.MODEL_MAX_TEXT_TOKENS],
            text_dim=self[cn.MODEL_TEXT_DIM],
            identity_aware=self[cn.MODEL_IDENTITY_AWARE],
            seed=self[cn.SEED],
        )

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        """Teacher sampler settings."""
        return SamplerConfig(
            self[cn.FLOW_CFG_WEIGHT],
            NoiseSchedule.uniform(self[cn.FLOW_NUM_STEPS]),
            self[cn.SEED] if seed is None else seed,
        )

    def distill_config(self) -> DistillConfig:
        """Distillation settings."""
        return DistillConfig(
            student_steps=self[cn.DISTILL_T],
            objects=self[cn.DISTILL_OBJECTS],
            lr_student=self[cn.DISTILL_LR_STUDENT],
            lr_critic=self[cn.DISTILL_LR_CRITIC],
            betas=(self[cn.DISTILL_BETA1], self[cn.DISTILL_BETA2]),
            weight_decay=self[cn.DISTILL_WEIGHT_DECAY],
            ratio=self[cn.DISTILL_RATIO],
            cfg_weight=self[cn.DISTILL_CFG_WEIGHT],
            seed=self[cn.SEED],
            use_step_loss=self[cn.DISTILL_STEP_LOSS],
            use_holistic_loss=self[cn.DISTILL_HOLISTIC_LOSS],
            renoise=RenoiseMode(self[cn.DISTILL_RENOISE]),
        )

    def icp_config(self) -> IcpConfig:
        """Placement fitting settings."""
        return IcpConfig(
            max_iterations=self[cn.ICP_MAX_ITERATIONS],
            tolerance=self[cn.ICP_TOLERANCE],
            yaw_candidates=self[cn.ICP_YAW_CANDIDATES],
            rotation_mode=RotationMode(self[cn.ICP_ROTATION_MODE]),
            max_source_points=self[cn.ICP_MAX_SOURCE_POINTS],
            moment_refinement=self[cn.ICP_MOMENT_REFINEMENT],
            seed=self[cn.SEED],
        )
