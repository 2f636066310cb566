"""Dual-guidance self-rollout distillation of the autoregressive teacher into a few-step student.

The student rolls out a whole scene on its own outputs. Every intermediate state is pulled toward
the step-wise teacher, the final state toward the holistic (text-only) teacher, both through
distribution-matching gradients whose fake score comes from a critic trained on student samples.
"""

from __future__ import annotations

import copy
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
from torch import nn

from .const import DEFAULT_CFG_WEIGHT, DMD_NORMALIZER_EPS, STUDENT_STEPS
from .exceptions import ConfigError, NumericalError
from .flowmatch import (
    NoiseSchedule,
    RenoiseMode,
    flow_interpolate,
    flow_matching_loss,
    guided_velocity,
    predict_x0,
    renoise,
)
from .latentcodec import DEFAULT_CODEC, LatentGrid, PatchCodec
from .netcore import ConditionBatch, ConditionEmbedding, VelocityModel, freeze, parameter_checksum

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of the distillation stage."""

    student_steps: int = STUDENT_STEPS
    objects: int = 0  # 0 = every object of the scene
    lr_student: float = 2e-6
    lr_critic: float = 5e-7
    betas: tuple[float, float] = (0.0, 0.999)
    weight_decay: float = 0.01
    ratio: int = 5
    cfg_weight: float = DEFAULT_CFG_WEIGHT
    seed: int = 0
    use_step_loss: bool = True
    use_holistic_loss: bool = True
    renoise: RenoiseMode = RenoiseMode.FRESH
    normalize: bool = True
    full_trajectory: bool = True

    def __post_init__(self):
        """Validate the configuration."""
        if self.student_steps < 1:
            raise ConfigError("student_steps must be at least 1")
        if self.ratio < 1:
            raise ConfigError("ratio must be at least 1")
        if self.lr_student <= 0 or self.lr_critic <= 0:
            raise ConfigError("learning rates must be positive")
        if not (self.use_step_loss or self.use_holistic_loss):
            raise ConfigError("At least one of the step-wise and holistic losses must be enabled")

    @property
    def schedule(self) -> NoiseSchedule:
        """Uniform few-step schedule of the student."""
        return NoiseSchedule.uniform(self.student_steps)


@dataclass
class TeacherBundle:
    """Frozen holistic and step-wise teachers plus the trainable critic."""

    holistic: nn.Module
    stepwise: nn.Module
    critic: nn.Module

    @classmethod
    def create(cls, holistic: nn.Module, stepwise: nn.Module) -> TeacherBundle:
        """Freeze both teachers and initialise the critic as a copy of the holistic teacher."""
        critic = copy.deepcopy(holistic)
        critic.requires_grad_(True)
        critic.train()
        return cls(freeze(holistic), freeze(stepwise), critic)

    def teacher_checksums(self) -> tuple[str, str]:
        """Checksums of (holistic, stepwise)."""
        return parameter_checksum(self.holistic), parameter_checksum(self.stepwise)


@dataclass
class CallCounters:
    """Network evaluations spent by one distillation step."""

    student_grad: int = 0
    student_detached: int = 0
    stepwise_scores: int = 0
    holistic_scores: int = 0
    teacher_evaluations: int = 0
    critic_evaluations: int = 0


@dataclass
class RolloutTrace:
    """Student predictions of one self-rollout.

    `outputs[i]` carries gradient; `contexts[i]` is the detached scene state it was conditioned on.
    """

    step: int
    outputs: list[torch.Tensor] = field(default_factory=list)
    contexts: list[torch.Tensor] = field(default_factory=list)
    finals: list[torch.Tensor] = field(default_factory=list)
    counters: CallCounters = field(default_factory=CallCounters)


@dataclass
class DistillScene:
    """Conditioning of one distillation example."""

    initial: LatentGrid
    objects: list[LatentGrid]
    instruction: ConditionEmbedding
    resolution: int


@dataclass
class DmdResult:
    """Distribution-matching loss of one prediction."""

    loss: torch.Tensor
    gradient: torch.Tensor
    weight: torch.Tensor
    calls: int


@dataclass
class DistillStepResult:
    """Logged values of one student update."""

    loss_step: float
    loss_holistic: float
    grad_norm: float
    counters: CallCounters
    outputs: list[torch.Tensor]


def _snap(latent: torch.Tensor, codec: PatchCodec, resolution: int) -> torch.Tensor:
    snapped, _ = codec.round_trip(LatentGrid(latent[0]), resolution)
    return snapped.values[None]


def student_rollout(  # noqa: PLR0913
    student: VelocityModel,
    scene: DistillScene,
    config: DistillConfig,
    step: int,
    generator: torch.Generator,
    codec: PatchCodec = DEFAULT_CODEC,
) -> RolloutTrace:
    """Self-rollout over the scene's objects with gradient only at denoising step `step`.

    Every other step runs without gradient and re-noises the clean estimate to the next time.
    With `full_trajectory` the loop continues below `step` down to t_1, as a sampler would.
    """
    if not 1 <= step <= config.student_steps:
        raise ValueError(f"Sampled step {step} outside 1..{config.student_steps}")

    trace = RolloutTrace(step)
    context = scene.initial.values[None]
    cond = ConditionBatch.stack([scene.instruction])
    shape = context.shape

    for i, obj in enumerate(scene.objects, start=1):
        o = obj.values[None]
        z = torch.randn(shape, generator=generator, dtype=torch.float64).to(context.dtype)
        next_context = context
        for j, t_from, t_to in config.schedule.intervals():
            if j < step and not config.full_trajectory:
                break
            t = torch.full((1,), t_from, dtype=context.dtype)
            if j == step:
                with torch.enable_grad():
                    velocity = student(z, context, o, cond, t)
                    x0_hat = predict_x0(z, velocity, t_from)
                trace.counters.student_grad += 1
                _check(x0_hat, i, j)
                trace.outputs.append(x0_hat)
                trace.contexts.append(context)
                next_context = _snap(x0_hat.detach(), codec, scene.resolution)
            else:
                with torch.no_grad():
                    velocity = student(z, context, o, cond, t)
                    x0_hat = predict_x0(z, velocity, t_from)
                trace.counters.student_detached += 1
                _check(x0_hat, i, j)
            if t_to > 0.0:
                z = renoise(x0_hat.detach(), velocity.detach(), t_to, config.renoise, generator)
        trace.finals.append(x0_hat.detach())
        context = next_context

    return trace


def _check(tensor: torch.Tensor, index: int, step: int) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericalError(
            f"Non-finite student prediction for object {index} at step {step}",
            operation=f"student_rollout[{index}]",
            step=step,
        )


def dmd_grad(  # noqa: PLR0913
    x0_pred: torch.Tensor,
    teacher: VelocityModel,
    critic: VelocityModel,
    teacher_inputs: tuple[torch.Tensor, torch.Tensor, ConditionBatch],
    critic_inputs: tuple[torch.Tensor, torch.Tensor, ConditionBatch],
    generator: torch.Generator,
    *,
    cfg_weight: float = DEFAULT_CFG_WEIGHT,
    normalize: bool = True,
) -> DmdResult:
    """Distribution-matching loss whose gradient w.r.t. x0_pred is (x0_critic - x0_teacher) * weight.

    `teacher_inputs` and `critic_inputs` are (s, o, condition) triples; the teacher is guided with
    `cfg_weight`, the critic is evaluated plainly conditional.
    """
    batch = x0_pred.shape[0]
    t = torch.rand(batch, generator=generator, dtype=torch.float64).to(x0_pred.dtype)
    eps = torch.randn(x0_pred.shape, generator=generator, dtype=torch.float64).to(x0_pred.dtype)
    x_t = flow_interpolate(x0_pred.detach(), eps, t)

    with torch.no_grad():
        s_teacher, o_teacher, cond_teacher = teacher_inputs
        null = ConditionBatch.stack(
            [ConditionEmbedding.null(cond_teacher.tokens.shape[-1], cond_teacher.tokens.dtype)] * batch,
        )
        v_teacher, calls = guided_velocity(teacher, x_t, s_teacher, o_teacher, cond_teacher, null, t, cfg_weight)
        x0_teacher = predict_x0(x_t, v_teacher, t)

        s_critic, o_critic, cond_critic = critic_inputs
        x0_critic = predict_x0(x_t, critic(x_t, s_critic, o_critic, cond_critic, t), t)

        reduce_dims = tuple(range(1, x0_pred.dim()))
        if normalize:
            normalizer = (x0_pred.detach() - x0_teacher).abs().mean(dim=reduce_dims, keepdim=True)
            if (normalizer < DMD_NORMALIZER_EPS).any():
                _LOGGER.warning("DMD normaliser below %g, clamping", DMD_NORMALIZER_EPS)
            weight = 1.0 / normalizer.clamp_min(DMD_NORMALIZER_EPS)
        else:
            weight = torch.ones((batch,) + (1,) * (x0_pred.dim() - 1), dtype=x0_pred.dtype)
        gradient = (x0_critic - x0_teacher) * weight

    target = (x0_pred - gradient).detach()
    loss = 0.5 * ((x0_pred - target) ** 2).sum()
    return DmdResult(loss, gradient, weight, calls + 1)


def _zeros(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(like)


def dual_guidance_step(  # noqa: PLR0913
    student: nn.Module,
    teachers: TeacherBundle,
    optimizer: torch.optim.Optimizer,
    scene: DistillScene,
    config: DistillConfig,
    generator: torch.Generator,
    codec: PatchCodec = DEFAULT_CODEC,
) -> DistillStepResult:
    """One student update: self-rollout, step-wise plus holistic DMD losses, AdamW step."""
    step = int(torch.randint(1, config.student_steps + 1, (1,), generator=generator))
    trace = student_rollout(student, scene, config, step, generator, codec)
    counters = trace.counters
    cond = ConditionBatch.stack([scene.instruction])

    loss_step = torch.zeros((), dtype=scene.initial.values.dtype)
    if config.use_step_loss:
        for x0_pred, context, obj in zip(trace.outputs, trace.contexts, scene.objects, strict=True):
            result = dmd_grad(
                x0_pred,
                teachers.stepwise,
                teachers.critic,
                (context, obj.values[None], cond),
                (_zeros(x0_pred), _zeros(x0_pred), cond),
                generator,
                cfg_weight=config.cfg_weight,
                normalize=config.normalize,
            )
            loss_step = loss_step + result.loss
            counters.stepwise_scores += 1
            counters.teacher_evaluations += result.calls - 1
            counters.critic_evaluations += 1

    loss_holistic = torch.zeros((), dtype=scene.initial.values.dtype)
    if config.use_holistic_loss:
        final = trace.outputs[-1]
        result = dmd_grad(
            final,
            teachers.holistic,
            teachers.critic,
            (_zeros(final), _zeros(final), cond),
            (_zeros(final), _zeros(final), cond),
            generator,
            cfg_weight=config.cfg_weight,
            normalize=config.normalize,
        )
        loss_holistic = result.loss
        counters.holistic_scores += 1
        counters.teacher_evaluations += result.calls - 1
        counters.critic_evaluations += 1

    total = loss_step + loss_holistic
    optimizer.zero_grad(set_to_none=True)
    grad_norm = 0.0
    if total.requires_grad:
        total.backward()
        params = [p for p in student.parameters() if p.grad is not None]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, float("inf"))) if params else 0.0
        if not math.isfinite(grad_norm):
            raise NumericalError("Non-finite student gradient", operation="dual_guidance_step")
        optimizer.step()

    return DistillStepResult(
        float(loss_step.detach()),
        float(loss_holistic.detach()),
        grad_norm,
        counters,
        [x.detach() for x in trace.outputs],
    )


def critic_step(
    critic: nn.Module,
    optimizer: torch.optim.Optimizer,
    outputs: Sequence[torch.Tensor],
    instruction: ConditionEmbedding,
    generator: torch.Generator,
) -> float:
    """One denoising update of the critic on detached student outputs, text-only conditioned."""
    x0 = torch.cat([x.detach() for x in outputs], dim=0)
    zeros = torch.zeros_like(x0)
    result = flow_matching_loss(critic, x0, zeros, zeros, [instruction] * x0.shape[0], generator, drop_rate=0.0)
    if not torch.isfinite(result.loss):
        raise NumericalError("Non-finite critic loss", operation="critic_step")
    optimizer.zero_grad(set_to_none=True)
    result.loss.backward()
    optimizer.step()
    return float(result.loss.detach())


def make_optimizers(
    student: nn.Module,
    critic: nn.Module,
    config: DistillConfig,
) -> tuple[torch.optim.AdamW, torch.optim.AdamW]:
    """AdamW for the student and the critic with the configured rates."""
    student_opt = torch.optim.AdamW(
        student.parameters(),
        lr=config.lr_student,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    critic_opt = torch.optim.AdamW(
        critic.parameters(),
        lr=config.lr_critic,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    return student_opt, critic_opt


def distill_iteration(  # noqa: PLR0913
    student: nn.Module,
    teachers: TeacherBundle,
    optimizers: tuple[torch.optim.Optimizer, torch.optim.Optimizer],
    scene: DistillScene,
    config: DistillConfig,
    generator: torch.Generator,
    codec: PatchCodec = DEFAULT_CODEC,
) -> tuple[DistillStepResult, float]:
    """One student update followed by `ratio` critic updates on its outputs."""
    result = dual_guidance_step(student, teachers, optimizers[0], scene, config, generator, codec)
    critic_loss = 0.0
    for _ in range(config.ratio):
        critic_loss = critic_step(teachers.critic, optimizers[1], result.outputs, scene.instruction, generator)
    return result, critic_loss
