"""Layout denoiser: a small diffusion transformer over concatenated [x, s, o] latent tokens.

Every token carries a position (f, h, w, l). f marks the latent source (0 for the noisy sample and
the scene state, 1 for the object) and enters the rotary embedding as a fourth coordinate band, so
attention can tell an object voxel from a scene voxel at the same location.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple, Protocol

import torch
from torch import nn

from .const import ROPE_BANDS, ROPE_BASE
from .exceptions import NumericalError, ShapeMismatchError
from .latentcodec import LatentGrid
from .utils import derive_seed, torch_generator

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the layout denoiser."""

    latent_channels: int = 8
    width: int = 64
    layers: int = 4
    heads: int = 4
    vocab: int = 4096
    max_text_tokens: int = 16
    text_dim: int = 64
    mlp_ratio: int = 4
    identity_aware: bool = True
    rope_base: float = ROPE_BASE
    seed: int = 0
    text_seed: int = 0

    def __post_init__(self):
        """Validate the head layout."""
        if self.width % self.heads:
            raise ValueError(f"Width {self.width} is not divisible by {self.heads} heads")
        if self.head_dim % (2 * ROPE_BANDS):
            raise ValueError(f"Head dim {self.head_dim} must be divisible by {2 * ROPE_BANDS}")

    @property
    def head_dim(self) -> int:
        """Per-head channel count."""
        return self.width // self.heads

    def as_strings(self) -> dict[str, str]:
        """Flat string form, stored in checkpoints."""
        return {f"model.{key}": str(value) for key, value in asdict(self).items()}

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> ModelConfig:
        """Inverse of `as_strings`; unknown keys are ignored."""
        kwargs = {}
        for config_field in fields(cls):
            raw = values.get(f"model.{config_field.name}")
            if raw is None:
                continue
            if config_field.type in ("bool", bool):
                kwargs[config_field.name] = raw.lower() == "true"
            elif config_field.type in ("float", float):
                kwargs[config_field.name] = float(raw)
            else:
                kwargs[config_field.name] = int(raw)
        return cls(**kwargs)


class TokenPosition(NamedTuple):
    """Identity flag plus grid coordinate of a token."""

    f: int
    h: int
    w: int
    l: int  # noqa: E741


@dataclass(frozen=True, eq=False)
class ConditionEmbedding:
    """Instruction embedding; a null embedding stands for 'no instruction'."""

    tokens: torch.Tensor = field(repr=False)
    is_null: bool = False

    @classmethod
    def null(cls, text_dim: int, dtype: torch.dtype = torch.float32) -> ConditionEmbedding:
        """Null embedding; the model substitutes its learned null vector."""
        return cls(torch.zeros(1, text_dim, dtype=dtype), is_null=True)


@dataclass(frozen=True, eq=False)
class ConditionBatch:
    """Padded batch of condition embeddings."""

    tokens: torch.Tensor  # (B, T, D_c)
    mask: torch.Tensor  # (B, T), True = attend
    null: torch.Tensor  # (B,)

    @classmethod
    def stack(cls, conditions: Sequence[ConditionEmbedding]) -> ConditionBatch:
        """Pad and stack condition embeddings into one batch."""
        if not conditions:
            raise ValueError("Expected at least one condition")
        length = max(len(c.tokens) for c in conditions)
        dim = conditions[0].tokens.shape[-1]
        dtype = conditions[0].tokens.dtype
        tokens = torch.zeros(len(conditions), length, dim, dtype=dtype)
        mask = torch.zeros(len(conditions), length, dtype=torch.bool)
        for row, condition in enumerate(conditions):
            count = len(condition.tokens)
            tokens[row, :count] = condition.tokens.to(dtype)
            mask[row, :count] = True
        null = torch.tensor([c.is_null for c in conditions], dtype=torch.bool)
        return cls(tokens, mask, null)

    def __len__(self) -> int:
        """Batch size."""
        return self.tokens.shape[0]


class VelocityModel(Protocol):
    """Anything predicting a flow velocity over x from (x, s, o, condition, t).

    x, s and o are (B, H, W, L, d) tensors, t has shape (B,).
    """

    def __call__(
        self,
        x: torch.Tensor,
        s: torch.Tensor,
        o: torch.Tensor,
        cond: ConditionBatch,
        t: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the velocity over x."""
        ...


def check_finite(tensor: torch.Tensor, operation: str, step: int | None = None) -> torch.Tensor:
    """Raise NumericalError naming `operation` when `tensor` holds NaN or inf."""
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"Non-finite values produced by {operation}", operation=operation, step=step)
    return tensor


###################
# Text conditioning
###################


class HashTextEmbedder:
    """Frozen bag-of-buckets text encoder.

    Tokens are lowercased whitespace-separated words, hashed into `vocab` buckets that index a
    seed-deterministic embedding table. Nothing here is trained.
    """

    def __init__(self, vocab: int, max_tokens: int, dim: int, seed: int = 0):
        """Create HashTextEmbedder."""
        self.vocab = vocab
        self.max_tokens = max_tokens
        self.dim = dim
        generator = torch_generator(derive_seed(seed, "text-table"))
        self._table = torch.randn(vocab, dim, generator=generator, dtype=torch.float64) / math.sqrt(dim)

    @classmethod
    def from_config(cls, config: ModelConfig) -> HashTextEmbedder:
        """Create the embedder matching a model configuration."""
        return cls(config.vocab, config.max_text_tokens, config.text_dim, config.text_seed)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        """Lowercase whitespace tokenization."""
        return text.lower().split()

    def bucket(self, token: str) -> int:
        """Stable hash bucket of a token."""
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.vocab

    def embed(self, text: str, dtype: torch.dtype = torch.float32) -> ConditionEmbedding:
        """Embed an instruction."""
        if not text.strip():
            raise ValueError("Instruction must not be empty")
        if not text.isprintable():
            raise ValueError("Instruction must consist of printable characters")
        buckets = [self.bucket(token) for token in self.tokenize(text)][: self.max_tokens]
        return ConditionEmbedding(self._table[torch.tensor(buckets)].to(dtype))

    def null(self, dtype: torch.dtype = torch.float32) -> ConditionEmbedding:
        """Null embedding with this embedder's width."""
        return ConditionEmbedding.null(self.dim, dtype)


def embed_instruction(text: str, embedder: HashTextEmbedder) -> ConditionEmbedding:
    """Encode an instruction string into a condition embedding."""
    return embedder.embed(text)


##################
# Rotary positions
##################


def rope_frequencies(head_dim: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Per-slot inverse frequencies of one coordinate band, length head_dim / 8."""
    if head_dim % (2 * ROPE_BANDS):
        raise ShapeMismatchError(f"Head dim {head_dim} is not divisible by {2 * ROPE_BANDS}")
    band_width = head_dim // ROPE_BANDS
    slots = torch.arange(band_width // 2, dtype=torch.float64)
    return base ** (-2.0 * slots / band_width)


def rope_angle_table(positions: torch.Tensor, head_dim: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotation angles for (n, 4) positions, shape (n, head_dim / 2), bands ordered [f; h; w; l]."""
    frequencies = rope_frequencies(head_dim, base)
    angles = positions.to(torch.float64)[:, :, None] * frequencies[None, None, :]
    return angles.reshape(positions.shape[0], -1)


def rope_angles(pos: TokenPosition, head_dim: int, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotation angles of a single token position, length head_dim / 2."""
    return rope_angle_table(torch.tensor([pos], dtype=torch.float64), head_dim, base)[0]


def apply_rotary(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive channel pairs of x (..., n, head_dim) by angles (n, head_dim / 2)."""
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return rotated.flatten(-2)


def attention_logits(
    q: torch.Tensor,
    k: torch.Tensor,
    q_angles: torch.Tensor,
    k_angles: torch.Tensor,
) -> torch.Tensor:
    """Scaled rotary attention logits between (n, dh) queries and (m, dh) keys."""
    q_rot = apply_rotary(q, q_angles)
    k_rot = apply_rotary(k, k_angles)
    return (q_rot @ k_rot.transpose(-2, -1)) / math.sqrt(q.shape[-1])


def token_positions(dims: tuple[int, int, int], *, identity_aware: bool = True) -> torch.Tensor:
    """Positions of the 3N tokens of [x | s | o], shape (3N, 4)."""
    h, w, l = dims
    grid = torch.stack(
        torch.meshgrid(torch.arange(h), torch.arange(w), torch.arange(l), indexing="ij"),
        dim=-1,
    ).reshape(-1, 3)
    blocks = []
    for flag in (0, 0, 1 if identity_aware else 0):
        blocks.append(torch.cat([torch.full((grid.shape[0], 1), flag), grid], dim=1))
    return torch.cat(blocks, dim=0)


def timestep_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    """Sinusoidal embedding of t in [0, 1], shape (B, width)."""
    half = width // 2
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    arguments = 1000.0 * t[:, None] * frequencies[None, :]
    return torch.cat([torch.cos(arguments), torch.sin(arguments)], dim=-1)


#########
# Network
#########


class SelfAttention(nn.Module):
    """Multi-head self-attention with rotary positions."""

    def __init__(self, width: int, heads: int):
        """Create SelfAttention."""
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
        """Attend over all tokens."""
        batch, n, width = x.shape
        q, k, v = self.qkv(x).reshape(batch, n, 3, self.heads, width // self.heads).permute(2, 0, 3, 1, 4)
        q = apply_rotary(q, angles)
        k = apply_rotary(k, angles)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(batch, n, width))


class CrossAttention(nn.Module):
    """Multi-head attention from latent tokens to instruction tokens."""

    def __init__(self, width: int, context_dim: int, heads: int):
        """Create CrossAttention."""
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(context_dim, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, context: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Attend from x to the unmasked context tokens."""
        batch, n, width = x.shape
        head_dim = width // self.heads
        q = self.q(x).reshape(batch, n, self.heads, head_dim).transpose(1, 2)
        k, v = self.kv(context).reshape(batch, context.shape[1], 2, self.heads, head_dim).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(batch, n, width))


class DenoiserBlock(nn.Module):
    """Pre-norm block: rotary self-attention, text cross-attention, feed-forward."""

    def __init__(self, config: ModelConfig):
        """Create DenoiserBlock."""
        super().__init__()
        self.norm1 = nn.LayerNorm(config.width)
        self.self_attention = SelfAttention(config.width, config.heads)
        self.norm2 = nn.LayerNorm(config.width)
        self.cross_attention = CrossAttention(config.width, config.text_dim, config.heads)
        self.norm3 = nn.LayerNorm(config.width)
        self.mlp = nn.Sequential(
            nn.Linear(config.width, config.mlp_ratio * config.width),
            nn.GELU(),
            nn.Linear(config.mlp_ratio * config.width, config.width),
        )

    def forward(self, x: torch.Tensor, angles: torch.Tensor, context: torch.Tensor, mask: torch.Tensor):
        """Apply the block."""
        x = x + self.self_attention(self.norm1(x), angles)
        x = x + self.cross_attention(self.norm2(x), context, mask)
        return x + self.mlp(self.norm3(x))


class LayoutDenoiser(nn.Module):
    """Velocity predictor v(x, s, o, c, t) over the noisy latent x."""

    def __init__(self, config: ModelConfig):
        """Create LayoutDenoiser with weights drawn deterministically from config.seed."""
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.input_proj = nn.Linear(config.latent_channels, config.width)
            self.time_mlp = nn.Sequential(
                nn.Linear(config.width, config.width),
                nn.SiLU(),
                nn.Linear(config.width, config.width),
            )
            self.blocks = nn.ModuleList([DenoiserBlock(config) for _ in range(config.layers)])
            self.out_norm = nn.LayerNorm(config.width)
            self.output_proj = nn.Linear(config.width, config.latent_channels)
            self.null_condition = nn.Parameter(0.02 * torch.randn(config.text_dim))
        self._angle_cache: dict[tuple[tuple[int, int, int], torch.dtype], torch.Tensor] = {}

    def _angles(self, dims: tuple[int, int, int], dtype: torch.dtype) -> torch.Tensor:
        key = (dims, dtype)
        if key not in self._angle_cache:
            positions = token_positions(dims, identity_aware=self.config.identity_aware)
            self._angle_cache[key] = rope_angle_table(positions, self.config.head_dim, self.config.rope_base).to(
                dtype,
            )
        return self._angle_cache[key]

    def forward(
        self,
        x: torch.Tensor,
        s: torch.Tensor,
        o: torch.Tensor,
        cond: ConditionBatch,
        t: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the velocity over x; x, s, o are (B, H, W, L, d), t is (B,)."""
        if x.shape != s.shape or x.shape != o.shape:
            raise ShapeMismatchError(
                f"x, s and o must share a shape, got {tuple(x.shape)}, {tuple(s.shape)}, {tuple(o.shape)}",
            )
        if x.dim() != 5 or x.shape[-1] != self.config.latent_channels:  # noqa: PLR2004
            raise ShapeMismatchError(f"Expected (B, H, W, L, {self.config.latent_channels}), got {tuple(x.shape)}")
        for name, value in (("x", x), ("s", s), ("o", o), ("t", t)):
            check_finite(value, f"input {name}")

        batch, h, w, l, channels = x.shape
        n = h * w * l
        dtype = self.input_proj.weight.dtype

        tokens = torch.cat([part.reshape(batch, n, channels) for part in (x, s, o)], dim=1).to(dtype)
        hidden = self.input_proj(tokens)
        hidden = hidden + self.time_mlp(timestep_embedding(t.to(dtype), self.config.width))[:, None, :]

        context = torch.where(
            cond.null[:, None, None],
            self.null_condition.to(dtype)[None, None, :].expand_as(cond.tokens),
            cond.tokens.to(dtype),
        )
        mask = cond.mask.clone()
        mask[cond.null] = False
        mask[cond.null, 0] = True

        angles = self._angles((h, w, l), dtype)
        for index, block in enumerate(self.blocks):
            hidden = check_finite(block(hidden, angles, context, mask), f"block[{index}]")

        velocity = self.output_proj(self.out_norm(hidden[:, :n]))
        return check_finite(velocity, "output_proj").reshape(batch, h, w, l, channels)


def forward(
    model: VelocityModel,
    x: LatentGrid,
    s: LatentGrid,
    o: LatentGrid,
    c: ConditionEmbedding,
    t: float,
) -> LatentGrid:
    """Single-sample velocity prediction over x."""
    if not x.values.shape == s.values.shape == o.values.shape:
        raise ShapeMismatchError("x, s and o must have identical dims and channels")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    velocity = model(
        x.values[None],
        s.values[None],
        o.values[None],
        ConditionBatch.stack([c]),
        torch.tensor([t], dtype=x.values.dtype),
    )
    return LatentGrid(velocity[0])


##########
# Training
##########


def trainable_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    """Named parameters that require gradients."""
    return {name: param for name, param in model.named_parameters() if param.requires_grad}


def parameter_count(model: nn.Module) -> int:
    """Total number of scalar parameters."""
    return sum(param.numel() for param in model.parameters())


def gradients(model: nn.Module, loss: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of the scalar returned by `loss` for every trainable parameter."""
    params = trainable_parameters(model)
    value = check_finite(loss(), "loss")
    if value.dim() != 0:
        raise ShapeMismatchError(f"Loss must be a scalar, got shape {tuple(value.shape)}")

    if not value.requires_grad:
        return {name: torch.zeros_like(param) for name, param in params.items()}

    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)
    result = {}
    for (name, param), grad in zip(params.items(), grads, strict=True):
        result[name] = torch.zeros_like(param) if grad is None else check_finite(grad, f"gradient of {name}")
    return result


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, used to prove a model was not updated."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def freeze(model: nn.Module) -> nn.Module:
    """Disable gradients and switch to eval mode."""
    model.requires_grad_(False)
    return model.eval()
