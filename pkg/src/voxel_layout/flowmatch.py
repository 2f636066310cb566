"""Flow matching: the linear noising path, training losses and the guided Euler sampler.

Time runs from data (t=0) to noise (t=1): x(t) = (1 - t) x0 + t eps, so the target velocity is
eps - x0 and sampling integrates from t=1 down to t=0.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import NamedTuple

import torch

from .const import DEFAULT_CFG_WEIGHT, DEFAULT_DROP_RATE, DEFAULT_NUM_STEPS, STUDENT_STEPS
from .exceptions import NumericalError, SamplerError, ShapeMismatchError
from .latentcodec import LatentGrid
from .netcore import ConditionBatch, ConditionEmbedding, VelocityModel
from .utils import torch_generator

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing times t_T > ... > t_1 in (0, 1]; t_0 = 0 is implicit."""

    steps: tuple[float, ...]

    def __post_init__(self):
        """Validate the schedule."""
        if not self.steps:
            raise ValueError("A noise schedule needs at least one step")
        if any(not 0.0 < t <= 1.0 for t in self.steps):
            raise ValueError(f"Schedule times must lie in (0, 1], got {self.steps}")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:], strict=False)):
            raise ValueError(f"Schedule times must be strictly decreasing, got {self.steps}")

    @classmethod
    def uniform(cls, num_steps: int) -> NoiseSchedule:
        """Uniform grid t_j = j / T."""
        if num_steps < 1:
            raise ValueError(f"Step count must be positive, got {num_steps}")
        return cls(tuple(j / num_steps for j in range(num_steps, 0, -1)))

    def __len__(self) -> int:
        """Step count T."""
        return len(self.steps)

    def intervals(self) -> Iterator[tuple[int, float, float]]:
        """Yield (j, t_j, t_{j-1}) from j = T down to 1."""
        times = (*self.steps, 0.0)
        for offset, (t_from, t_to) in enumerate(zip(times, times[1:], strict=False)):
            yield len(self.steps) - offset, t_from, t_to


@dataclass(frozen=True)
class SamplerConfig:
    """Guidance weight, time grid and seed of the ODE sampler."""

    cfg_weight: float = DEFAULT_CFG_WEIGHT
    schedule: NoiseSchedule = field(default_factory=lambda: NoiseSchedule.uniform(DEFAULT_NUM_STEPS))
    seed: int = 0

    def __post_init__(self):
        """Validate the guidance weight."""
        if not math.isfinite(self.cfg_weight) or self.cfg_weight < 0:
            raise ValueError(f"Guidance weight must be finite and non-negative, got {self.cfg_weight}")

    def with_seed(self, seed: int) -> SamplerConfig:
        """Copy with another seed."""
        return SamplerConfig(self.cfg_weight, self.schedule, seed)


class RenoiseMode(StrEnum):
    """How a few-step sampler moves a clean estimate back to the next noise level."""

    FRESH = "fresh"
    PREDICTED = "predicted"


class TrainingSample(NamedTuple):
    """One conditioned flow-matching example."""

    x0: LatentGrid
    s: LatentGrid
    o: LatentGrid
    c: ConditionEmbedding


class FlowNoise(NamedTuple):
    """Random draws of one loss evaluation, in draw order."""

    t: torch.Tensor  # (B,)
    eps: torch.Tensor  # (B, H, W, L, d)
    drop: torch.Tensor  # (B,) bool


class FlowLossResult(NamedTuple):
    """Loss value plus what was drawn to compute it."""

    loss: torch.Tensor
    dropped: int
    noise: FlowNoise


class SampleResult(NamedTuple):
    """Sampler output and the number of network evaluations spent."""

    latent: LatentGrid
    evaluations: int


def flow_interpolate(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """Tensor form of `flow_forward`; a tensor t broadcasts over the leading batch axis."""
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    return (1 - t) * x0 + t * eps


def flow_forward(x0: LatentGrid, eps: LatentGrid, t: float) -> LatentGrid:
    """Point at time t on the straight path from x0 to eps."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return LatentGrid(x0.values.clone())
    if t == 1.0:
        return LatentGrid(eps.values.clone())
    return LatentGrid(flow_interpolate(x0.values, eps.values, t))


def predict_x0(x_t: torch.Tensor, velocity: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """Clean estimate implied by a velocity at time t."""
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        t = t.reshape(-1, *([1] * (x_t.dim() - 1)))
    return x_t - t * velocity


def draw_flow_noise(
    shape: torch.Size | tuple[int, ...],
    generator: torch.Generator,
    drop_rate: float = DEFAULT_DROP_RATE,
    dtype: torch.dtype = torch.float32,
) -> FlowNoise:
    """Draw t, eps and the condition-drop mask for a batch; `shape` includes the batch axis."""
    batch = shape[0]
    t = torch.rand(batch, generator=generator, dtype=torch.float64).to(dtype)
    eps = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    drop = torch.rand(batch, generator=generator, dtype=torch.float64) < drop_rate
    return FlowNoise(t, eps, drop)


def _stack_latents(latents: Sequence[LatentGrid]) -> torch.Tensor:
    shapes = {tuple(latent.values.shape) for latent in latents}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"All latents of a batch must share a shape, got {sorted(shapes)}")
    return torch.stack([latent.values for latent in latents])


def flow_matching_loss(
    model: VelocityModel,
    x0: torch.Tensor,
    s: torch.Tensor,
    o: torch.Tensor,
    conditions: Sequence[ConditionEmbedding],
    generator: torch.Generator,
    drop_rate: float = DEFAULT_DROP_RATE,
) -> FlowLossResult:
    """Mean squared velocity error on batched tensors; dropped rows see the null condition."""
    noise = draw_flow_noise(x0.shape, generator, drop_rate, x0.dtype)
    text_dim = conditions[0].tokens.shape[-1]
    null = ConditionEmbedding.null(text_dim, conditions[0].tokens.dtype)
    used = [null if dropped else condition for condition, dropped in zip(conditions, noise.drop.tolist(), strict=True)]

    x_t = flow_interpolate(x0, noise.eps, noise.t)
    velocity = model(x_t, s, o, ConditionBatch.stack(used), noise.t)
    loss = ((velocity - (noise.eps - x0)) ** 2).mean()
    return FlowLossResult(loss, int(noise.drop.sum()), noise)


def fm_loss(
    model: VelocityModel,
    batch: Sequence[TrainingSample],
    generator: torch.Generator,
    drop_rate: float = DEFAULT_DROP_RATE,
) -> FlowLossResult:
    """Layout-conditioned flow-matching loss over (x0, s, o, c) samples."""
    if not batch:
        raise ValueError("Cannot compute a loss over an empty batch")
    x0 = _stack_latents([sample.x0 for sample in batch])
    s = _stack_latents([sample.s for sample in batch])
    o = _stack_latents([sample.o for sample in batch])
    if s.shape != x0.shape or o.shape != x0.shape:
        raise ShapeMismatchError("x0, s and o must share a shape")
    return flow_matching_loss(model, x0, s, o, [sample.c for sample in batch], generator, drop_rate)


def fm_loss_uncond(
    model: VelocityModel,
    batch: Sequence[tuple[LatentGrid, ConditionEmbedding]],
    generator: torch.Generator,
    drop_rate: float = DEFAULT_DROP_RATE,
) -> FlowLossResult:
    """Text-only flow-matching loss; the scene and object inputs are all-zero latents."""
    if not batch:
        raise ValueError("Cannot compute a loss over an empty batch")
    x0 = _stack_latents([x for x, _ in batch])
    zeros = torch.zeros_like(x0)
    return flow_matching_loss(model, x0, zeros, zeros, [c for _, c in batch], generator, drop_rate)


def guided_velocity(
    model: VelocityModel,
    x: torch.Tensor,
    s: torch.Tensor,
    o: torch.Tensor,
    cond: ConditionBatch,
    null: ConditionBatch,
    t: torch.Tensor,
    cfg_weight: float,
) -> tuple[torch.Tensor, int]:
    """Classifier-free guided velocity and the number of model calls it took."""
    v_cond = model(x, s, o, cond, t)
    if cfg_weight == 1.0:
        return v_cond, 1
    v_uncond = model(x, s, o, null, t)
    return v_uncond + cfg_weight * (v_cond - v_uncond), 2


def euler_integrate(
    model: VelocityModel,
    x: torch.Tensor,
    s: torch.Tensor,
    o: torch.Tensor,
    cond: ConditionBatch,
    null: ConditionBatch,
    schedule: NoiseSchedule,
    cfg_weight: float,
) -> tuple[torch.Tensor, int]:
    """Integrate the guided ODE from t_T down to 0 starting at x."""
    evaluations = 0
    for j, t_from, t_to in schedule.intervals():
        t = torch.full((x.shape[0],), t_from, dtype=x.dtype)
        try:
            velocity, calls = guided_velocity(model, x, s, o, cond, null, t, cfg_weight)
        except NumericalError as err:
            message = f"Velocity evaluation failed at step {j}: {err}"
            raise SamplerError(message, operation=err.operation, step=j) from err
        evaluations += calls
        x = x - (t_from - t_to) * velocity
        if not torch.isfinite(x).all():
            raise SamplerError(f"Non-finite sampler state at step {j}", operation="euler_step", step=j)
        _LOGGER.debug("Euler step %d: t %.4f -> %.4f", j, t_from, t_to)
    return x, evaluations


def initial_noise(like: LatentGrid, seed: int) -> torch.Tensor:
    """Seeded standard normal starting state with a leading batch axis."""
    generator = torch_generator(seed)
    return torch.randn((1, *like.values.shape), generator=generator, dtype=torch.float64).to(like.values.dtype)


@torch.no_grad()
def sample(
    model: VelocityModel,
    s: LatentGrid,
    o: LatentGrid,
    c: ConditionEmbedding,
    config: SamplerConfig,
) -> SampleResult:
    """Guided Euler sampling of a latent conditioned on scene s, object o and instruction c."""
    if s.values.shape != o.values.shape:
        raise ShapeMismatchError("s and o must share a shape")
    x = initial_noise(s, config.seed)
    cond = ConditionBatch.stack([c])
    null = ConditionBatch.stack([ConditionEmbedding.null(c.tokens.shape[-1], c.tokens.dtype)])
    x, evaluations = euler_integrate(
        model,
        x,
        s.values[None],
        o.values[None],
        cond,
        null,
        config.schedule,
        config.cfg_weight,
    )
    return SampleResult(LatentGrid(x[0]), evaluations)


def renoise(
    x0_hat: torch.Tensor,
    velocity: torch.Tensor,
    t: float,
    mode: RenoiseMode,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Move a clean estimate back to noise level t.

    FRESH mixes in new Gaussian noise. PREDICTED reuses the noise implied by the velocity,
    eps = x0_hat + v, which makes a denoise-renoise pair identical to one Euler step.
    """
    if mode == RenoiseMode.PREDICTED:
        eps = x0_hat + velocity
    else:
        if generator is None:
            raise ValueError("Fresh re-noising needs a generator")
        eps = torch.randn(x0_hat.shape, generator=generator, dtype=torch.float64).to(x0_hat.dtype)
    return flow_interpolate(x0_hat, eps, t)


@torch.no_grad()
def sample_few_step(
    model: VelocityModel,
    s: LatentGrid,
    o: LatentGrid,
    c: ConditionEmbedding,
    schedule: NoiseSchedule,
    seed: int = 0,
    mode: RenoiseMode = RenoiseMode.FRESH,
) -> SampleResult:
    """Denoise-then-renoise sampling without guidance, one model call per step."""
    if s.values.shape != o.values.shape:
        raise ShapeMismatchError("s and o must share a shape")
    generator = torch_generator(seed)
    x = torch.randn((1, *s.values.shape), generator=generator, dtype=torch.float64).to(s.values.dtype)
    cond = ConditionBatch.stack([c])
    evaluations = 0
    x0_hat = x
    for j, t_from, t_to in schedule.intervals():
        t = torch.full((1,), t_from, dtype=x.dtype)
        try:
            velocity = model(x, s.values[None], o.values[None], cond, t)
        except NumericalError as err:
            message = f"Velocity evaluation failed at step {j}: {err}"
            raise SamplerError(message, operation=err.operation, step=j) from err
        evaluations += 1
        x0_hat = predict_x0(x, velocity, t_from)
        if t_to > 0.0:
            x = renoise(x0_hat, velocity, t_to, mode, generator)
        if not torch.isfinite(x0_hat).all():
            raise SamplerError(f"Non-finite sampler state at step {j}", operation="few_step", step=j)
    return SampleResult(LatentGrid(x0_hat[0]), evaluations)


@dataclass(frozen=True)
class GuidedSampler:
    """Many-step Euler sampler with classifier-free guidance, bound to a model."""

    model: VelocityModel
    config: SamplerConfig = field(default_factory=SamplerConfig)

    def __call__(self, s: LatentGrid, o: LatentGrid, c: ConditionEmbedding, seed: int) -> SampleResult:
        """Sample with the given seed."""
        return sample(self.model, s, o, c, self.config.with_seed(seed))


@dataclass(frozen=True)
class FewStepSampler:
    """Unguided denoise-renoise sampler, bound to a model."""

    model: VelocityModel
    schedule: NoiseSchedule = field(default_factory=lambda: NoiseSchedule.uniform(STUDENT_STEPS))
    mode: RenoiseMode = RenoiseMode.FRESH

    def __call__(self, s: LatentGrid, o: LatentGrid, c: ConditionEmbedding, seed: int) -> SampleResult:
        """Sample with the given seed."""
        return sample_few_step(self.model, s, o, c, self.schedule, seed, self.mode)
