"""Generic Utilities."""

import hashlib
import math

import numpy as np
import torch


def derive_seed(seed: int, *salt: int | str) -> int:
    """Derive a stable 63-bit child seed from a parent seed and salt values."""
    digest = hashlib.blake2b(repr((seed, *salt)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    """Return a CPU torch generator seeded with `seed`."""
    return torch.Generator().manual_seed(seed)


def numpy_rng(seed: int) -> np.random.Generator:
    """Return a numpy generator seeded with `seed`."""
    return np.random.default_rng(seed)


def wrap_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = (angle + math.pi) % (2 * math.pi) - math.pi
    # the modulo of a value just below -pi can land exactly on pi
    return -math.pi if wrapped >= math.pi else wrapped


def yaw_matrix(yaw: float) -> np.ndarray:
    """Rotation about the vertical (z) axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
