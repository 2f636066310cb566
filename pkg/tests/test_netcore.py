import pytest
import torch

from voxel_layout.exceptions import NumericalError, ShapeMismatchError
from voxel_layout.latentcodec import LatentGrid
from voxel_layout.netcore import (
    ConditionBatch,
    ConditionEmbedding,
    HashTextEmbedder,
    LayoutDenoiser,
    ModelConfig,
    TokenPosition,
    apply_rotary,
    attention_logits,
    forward,
    gradients,
    parameter_checksum,
    rope_angle_table,
    rope_angles,
    token_positions,
)


def _inputs(config: ModelConfig, dims=(2, 2, 2), batch: int = 1, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    shape = (batch, *dims, config.latent_channels)
    x, s, o = (torch.randn(shape, generator=generator) for _ in range(3))
    cond = ConditionBatch.stack([ConditionEmbedding(torch.randn(3, config.text_dim, generator=generator))] * batch)
    return x, s, o, cond, torch.full((batch,), 0.5)


@pytest.mark.parametrize("seed", range(100))
def test_rope_logits_depend_only_on_relative_position(seed):
    head_dim = 16
    generator = torch.Generator().manual_seed(seed)
    q = torch.randn(1, head_dim, generator=generator, dtype=torch.float64)
    k = torch.randn(1, head_dim, generator=generator, dtype=torch.float64)
    pos_q, pos_k, shift = torch.randint(0, 16, (3, 4), generator=generator)

    def logit(a, b):
        q_angles = rope_angles(TokenPosition(*a.tolist()), head_dim)[None]
        return attention_logits(q, k, q_angles, rope_angles(TokenPosition(*b.tolist()), head_dim)[None])

    base = logit(pos_q, pos_k)
    shifted = logit(pos_q + shift, pos_k + shift)

    torch.testing.assert_close(base, shifted)


def test_identity_flag_rotates_only_its_own_band():
    head_dim = 16
    x = torch.randn(1, head_dim, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

    scene = apply_rotary(x, rope_angles(TokenPosition(0, 2, 1, 3), head_dim)[None])
    obj = apply_rotary(x, rope_angles(TokenPosition(1, 2, 1, 3), head_dim)[None])

    band = head_dim // 4
    assert not torch.allclose(scene[:, :band], obj[:, :band])
    torch.testing.assert_close(scene[:, band:], obj[:, band:])


def test_without_identity_flags_coincident_tokens_are_interchangeable():
    head_dim = 16
    generator = torch.Generator().manual_seed(4)
    q = torch.randn(1, head_dim, generator=generator, dtype=torch.float64)
    k = torch.randn(1, head_dim, generator=generator, dtype=torch.float64)
    angles = rope_angle_table(token_positions((2, 2, 2), identity_aware=False), head_dim)

    # token 3 of the noisy block against token 3 of the scene block and of the object block
    torch.testing.assert_close(
        attention_logits(q, k, angles[3:4], angles[11:12]),
        attention_logits(q, k, angles[3:4], angles[19:20]),
    )


def test_identity_flag_separates_coincident_tokens():
    head_dim = 16
    generator = torch.Generator().manual_seed(2)
    q = torch.randn(1, head_dim, generator=generator, dtype=torch.float64)
    k = torch.randn(1, head_dim, generator=generator, dtype=torch.float64)
    scene = rope_angles(TokenPosition(0, 1, 1, 1), head_dim)[None]
    obj = rope_angles(TokenPosition(1, 1, 1, 1), head_dim)[None]

    assert not torch.allclose(attention_logits(q, k, scene, scene), attention_logits(q, k, scene, obj))


def test_token_positions_layout():
    positions = token_positions((2, 2, 2))

    assert positions.shape == (24, 4)
    assert positions[:16, 0].eq(0).all()
    assert positions[16:, 0].eq(1).all()
    assert positions[:8, 1:].tolist() == positions[16:, 1:].tolist()
    assert token_positions((2, 2, 2), identity_aware=False)[:, 0].eq(0).all()


def test_rope_head_dim_must_split_into_bands():
    with pytest.raises(ShapeMismatchError):
        rope_angle_table(torch.zeros(1, 4), 12)
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(width=24, heads=2)


def test_denoiser_output_shape(tiny_model, tiny_model_config):
    velocity = tiny_model(*_inputs(tiny_model_config, dims=(2, 3, 2), batch=2))

    assert velocity.shape == (2, 2, 3, 2, tiny_model_config.latent_channels)
    assert torch.isfinite(velocity).all()


def test_denoiser_is_deterministic(tiny_model_config):
    inputs = _inputs(tiny_model_config)

    first = LayoutDenoiser(tiny_model_config)(*inputs)
    second = LayoutDenoiser(tiny_model_config)(*inputs)

    torch.testing.assert_close(first, second)


def test_denoiser_rejects_mismatched_inputs(tiny_model, tiny_model_config):
    x, s, o, cond, t = _inputs(tiny_model_config)

    with pytest.raises(ShapeMismatchError):
        tiny_model(x, s[:, :1], o, cond, t)


def test_denoiser_rejects_non_finite_inputs(tiny_model, tiny_model_config):
    x, s, o, cond, t = _inputs(tiny_model_config)
    x[0, 0, 0, 0, 0] = float("inf")

    with pytest.raises(NumericalError, match="input x"):
        tiny_model(x, s, o, cond, t)


def test_object_input_matters(tiny_model, tiny_model_config):
    x, s, o, cond, t = _inputs(tiny_model_config)

    assert not torch.allclose(tiny_model(x, s, o, cond, t), tiny_model(x, s, torch.zeros_like(o), cond, t))


def test_null_condition_uses_learned_vector(tiny_model, tiny_model_config):
    x, s, o, _, t = _inputs(tiny_model_config)
    null_a = ConditionBatch.stack([ConditionEmbedding.null(tiny_model_config.text_dim)])
    null_b = ConditionBatch.stack(
        [ConditionEmbedding(torch.ones(4, tiny_model_config.text_dim), is_null=True)],
    )

    torch.testing.assert_close(tiny_model(x, s, o, null_a, t), tiny_model(x, s, o, null_b, t))


def test_single_sample_forward(tiny_model, tiny_model_config, embedder):
    latent = LatentGrid.zeros((2, 2, 2), tiny_model_config.latent_channels)

    velocity = forward(tiny_model, latent, latent, latent, embedder.embed("a chair"), 0.3)

    assert velocity.dims == (2, 2, 2)
    with pytest.raises(ValueError, match="t must lie"):
        forward(tiny_model, latent, latent, latent, embedder.embed("a chair"), 1.5)


def test_gradients_match_finite_differences(tiny_model_config):
    model = LayoutDenoiser(tiny_model_config).double()
    x, s, o, cond, t = _inputs(tiny_model_config)
    x, s, o, t = x.double(), s.double(), o.double(), t.double()
    cond = ConditionBatch(cond.tokens.double(), cond.mask, cond.null)

    def loss():
        return model(x, s, o, cond, t).pow(2).mean()

    grads = gradients(model, loss)
    name = "output_proj.weight"
    param = dict(model.named_parameters())[name]
    step = 1e-6
    with torch.no_grad():
        original = param[0, 0].item()
        param[0, 0] = original + step
        plus = loss().item()
        param[0, 0] = original - step
        minus = loss().item()
        param[0, 0] = original

    assert grads[name][0, 0].item() == pytest.approx((plus - minus) / (2 * step), rel=1e-5, abs=1e-9)


def test_gradients_of_unused_parameters_are_zero(tiny_model):
    grads = gradients(tiny_model, lambda: tiny_model.output_proj.bias.sum())

    assert grads["output_proj.bias"].eq(1.0).all()
    assert grads["input_proj.weight"].eq(0.0).all()


def test_parameter_checksum_tracks_updates(tiny_model):
    before = parameter_checksum(tiny_model)
    assert before == parameter_checksum(tiny_model)

    with torch.no_grad():
        tiny_model.output_proj.bias.add_(1.0)

    assert parameter_checksum(tiny_model) != before


def test_text_embedder_is_stable():
    first = HashTextEmbedder(64, 4, 8, seed=3)
    second = HashTextEmbedder(64, 4, 8, seed=3)

    embedding = first.embed("A Bed against the wall and a lamp")

    assert embedding.tokens.shape == (4, 8)
    torch.testing.assert_close(embedding.tokens, second.embed("a bed AGAINST the wall").tokens)
    with pytest.raises(ValueError, match="empty"):
        first.embed("   ")


def test_condition_batch_pads_and_masks():
    batch = ConditionBatch.stack([ConditionEmbedding(torch.ones(3, 2)), ConditionEmbedding.null(2)])

    assert batch.tokens.shape == (2, 3, 2)
    assert batch.mask.tolist() == [[True, True, True], [True, False, False]]
    assert batch.null.tolist() == [False, True]
