"""Exceptions from the voxel layout library."""

from __future__ import annotations

from typing import Any


class VoxelLayoutException(Exception):
    """Base class for voxel layout exceptions."""


class ConfigError(VoxelLayoutException):
    """The run configuration is invalid."""


class DataError(VoxelLayoutException):
    """A dataset, layout or checkpoint file is missing or inconsistent."""


class DecodeError(DataError):
    """Decoding failed."""


class EncodeError(DataError):
    """Encoding failed."""


class SceneGenerationError(DataError):
    """The procedural scene generator exhausted its rejection budget."""

    def __init__(self, *args, seed: int | None = None, attempts: int | None = None, **kwargs):
        """Create SceneGenerationError."""
        super().__init__(*args, **kwargs)
        self.seed = seed
        self.attempts = attempts


class GeometryError(VoxelLayoutException):
    """Base class for voxel geometry errors."""


class OutOfBoundsError(GeometryError):
    """A shape does not fit inside the unit scene cube."""


class ResolutionMismatchError(GeometryError):
    """Two grids with different resolutions or frames were combined."""


class EmptyGridError(GeometryError):
    """An operation requiring occupied voxels received an empty grid."""


class ShapeMismatchError(VoxelLayoutException):
    """Latent grids or codec dimensions do not match."""


class NumericalError(VoxelLayoutException):
    """A non-finite value was produced."""

    def __init__(self, *args, operation: str | None = None, step: int | None = None, **kwargs):
        """Create NumericalError."""
        super().__init__(*args, **kwargs)
        self.operation = operation
        self.step = step


class SamplerError(NumericalError):
    """The ODE sampler produced a non-finite state."""


class RegistrationError(VoxelLayoutException):
    """ICP could not register the object to the scene region."""

    def __init__(self, *args, best: Any | None = None, **kwargs):
        """Create RegistrationError."""
        super().__init__(*args, **kwargs)
        self.best = best


class DegenerateCorrespondenceError(RegistrationError):
    """The correspondence set is rank deficient."""


class OrderingError(VoxelLayoutException):
    """Objects could not be ordered into a queue."""


class RolloutError(VoxelLayoutException):
    """An autoregressive rollout step failed."""

    def __init__(
        self,
        *args,
        index: int | None = None,
        placements: list | None = None,
        state: Any | None = None,
        **kwargs,
    ):
        """Create RolloutError, carrying the partial results."""
        super().__init__(*args, **kwargs)
        self.index = index
        self.placements = placements or []
        self.state = state


class EditError(VoxelLayoutException):
    """The object to remove is not present in the scene."""
