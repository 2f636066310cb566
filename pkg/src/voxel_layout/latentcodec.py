"""Deterministic patch-pooling codec between occupancy grids and dense latent grids.

Channel 0 of every latent cell carries the occupied fraction of its P^3 voxel patch mapped to
[-1, 1]; the remaining channels are fixed cosine features of the cell coordinate, giving the
denoiser spatial anchors. The codec has no parameters and is approximately invertible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .const import DEFAULT_DECODE_THRESHOLD, DEFAULT_LATENT_CHANNELS, DEFAULT_PATCH_SIZE
from .exceptions import NumericalError, ShapeMismatchError
from .voxelgrid import Frame, OccupancyGrid


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """Dense H x W x L grid of d-channel cells."""

    values: torch.Tensor = field(repr=False)

    def __post_init__(self):
        """Validate rank and finiteness."""
        if self.values.dim() != 4:  # noqa: PLR2004
            raise ShapeMismatchError(f"Latent grid must have rank 4 (H, W, L, d), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise NumericalError("Latent grid contains non-finite values", operation="LatentGrid")

    @property
    def dims(self) -> tuple[int, int, int]:
        """Spatial dimensions (H, W, L)."""
        h, w, l, _ = self.values.shape
        return h, w, l

    @property
    def channels(self) -> int:
        """Channel count d."""
        return self.values.shape[-1]

    @property
    def n_tokens(self) -> int:
        """N = H * W * L."""
        h, w, l = self.dims
        return h * w * l

    def tokens(self) -> torch.Tensor:
        """Row-major token view, shape (N, d)."""
        return self.values.reshape(self.n_tokens, self.channels)

    @classmethod
    def from_tokens(cls, tokens: torch.Tensor, dims: tuple[int, int, int]) -> LatentGrid:
        """Inverse of `tokens`; accepts (N, d) or (1, N, d)."""
        return cls(tokens.reshape(*dims, tokens.shape[-1]))

    @classmethod
    def zeros(cls, dims: tuple[int, int, int], channels: int, dtype: torch.dtype = torch.float32) -> LatentGrid:
        """All-zero latent (the 'no scene / no object' conditioning)."""
        return cls(torch.zeros(*dims, channels, dtype=dtype))

    def detach(self) -> LatentGrid:
        """Copy without autograd history."""
        return LatentGrid(self.values.detach())


def positional_features(dims: tuple[int, int, int], channels: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed smooth features for channels 1..d-1, shape (H, W, L, d-1), values in [-1, 1].

    Channel k (1-based) uses axis (k-1) mod 3 and harmonic (k-1) // 3 + 1.
    """
    features = []
    for k in range(1, channels):
        axis = (k - 1) % 3
        harmonic = (k - 1) // 3 + 1
        size = dims[axis]
        coord = (torch.arange(size, dtype=torch.float64) + 0.5) / size
        values = torch.cos(math.pi * harmonic * coord)
        shape = [1, 1, 1]
        shape[axis] = size
        features.append(values.reshape(shape).expand(*dims))
    if not features:
        return torch.zeros(*dims, 0, dtype=dtype)
    return torch.stack(features, dim=-1).to(dtype)


@dataclass(frozen=True)
class PatchCodec:
    """Patch-pooling codec with patch size P, d channels and decode threshold."""

    patch: int = DEFAULT_PATCH_SIZE
    channels: int = DEFAULT_LATENT_CHANNELS
    threshold: float = DEFAULT_DECODE_THRESHOLD
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        """Validate codec parameters."""
        if self.patch < 1 or self.channels < 1:
            raise ValueError("Patch size and channel count must be positive")

    def latent_dims(self, resolution: int) -> tuple[int, int, int]:
        """Latent grid dimensions for an occupancy resolution."""
        if resolution % self.patch:
            raise ShapeMismatchError(f"Resolution {resolution} is not divisible by patch size {self.patch}")
        n = resolution // self.patch
        return n, n, n

    def encode(self, grid: OccupancyGrid) -> LatentGrid:
        """Pool occupancy into latent cells."""
        n = self.latent_dims(grid.resolution)[0]
        p = self.patch
        fraction = grid.cells.reshape(n, p, n, p, n, p).mean(axis=(1, 3, 5))
        occupancy = torch.from_numpy(2.0 * fraction - 1.0).to(self.dtype).unsqueeze(-1)
        return LatentGrid(torch.cat([occupancy, positional_features((n, n, n), self.channels, self.dtype)], dim=-1))

    def decode(self, latent: LatentGrid, resolution: int, frame: Frame = Frame.SCENE) -> OccupancyGrid:
        """Emit every patch whose occupancy channel exceeds the threshold."""
        if any(dim * self.patch != resolution for dim in latent.dims):
            raise ShapeMismatchError(
                f"Latent dims {latent.dims} with patch {self.patch} do not match resolution {resolution}",
            )
        active = (latent.values[..., 0] > self.threshold).detach().cpu().numpy()
        for axis in range(3):
            active = np.repeat(active, self.patch, axis=axis)
        return OccupancyGrid(resolution, active, frame)

    def round_trip(self, latent: LatentGrid, resolution: int) -> tuple[LatentGrid, OccupancyGrid]:
        """Decode then re-encode, returning the snapped latent and its occupancy."""
        occupancy = self.decode(latent, resolution)
        return self.encode(occupancy), occupancy


DEFAULT_CODEC = PatchCodec()


def encode(grid: OccupancyGrid, codec: PatchCodec = DEFAULT_CODEC) -> LatentGrid:
    """Encode an occupancy grid with the given codec."""
    return codec.encode(grid)


def decode(latent: LatentGrid, resolution: int, codec: PatchCodec = DEFAULT_CODEC) -> OccupancyGrid:
    """Decode a latent grid with the given codec."""
    return codec.decode(latent, resolution)
