import math

import pytest

import voxel_layout.config_names as cn
from voxel_layout.config import RunConfig
from voxel_layout.latentcodec import PatchCodec
from voxel_layout.netcore import HashTextEmbedder, LayoutDenoiser, ModelConfig
from voxel_layout.scenes import gen_scene

from .oracles import ConstantVelocity, GaussianOracle, make_scene

TINY_CONFIG = {
    cn.GRID_RESOLUTION: 16,
    cn.CODEC_PATCH: 4,
    cn.CODEC_D: 4,
    cn.MODEL_WIDTH: 16,
    cn.MODEL_HEADS: 2,
    cn.MODEL_LAYERS: 1,
    cn.MODEL_VOCAB: 64,
    cn.MODEL_MAX_TEXT_TOKENS: 8,
    cn.MODEL_TEXT_DIM: 8,
    cn.FLOW_NUM_STEPS: 3,
    cn.TRAIN_STEPS: 3,
    cn.TRAIN_BATCH_SIZE: 2,
    cn.TRAIN_LOG_EVERY: 1,
    cn.DISTILL_T: 2,
    cn.DISTILL_STEPS: 2,
    cn.DISTILL_RATIO: 1,
    cn.DISTILL_OBJECTS: 2,
    cn.DATA_TRAIN: 2,
    cn.DATA_VAL: 1,
    cn.DATA_TEST: 2,
    cn.METRICS_MIN_OBJECTS: 1,
    cn.METRICS_BOOTSTRAP: 50,
}


@pytest.fixture
def tiny_config(tmp_path):
    """Run configuration small enough to train in a unit test."""
    return RunConfig(
        {
            **TINY_CONFIG,
            cn.PATHS_DATA: str(tmp_path / "data"),
            cn.PATHS_OUT: str(tmp_path / "runs"),
        },
    )


@pytest.fixture
def tiny_model_config():
    return ModelConfig(latent_channels=4, width=16, layers=1, heads=2, vocab=64, max_text_tokens=8, text_dim=8)


@pytest.fixture
def tiny_model(tiny_model_config):
    return LayoutDenoiser(tiny_model_config)


@pytest.fixture
def embedder(tiny_model_config):
    return HashTextEmbedder.from_config(tiny_model_config)


@pytest.fixture
def exact_codec():
    """Codec with patch size 1: encode and decode are exact inverses."""
    return PatchCodec(patch=1, channels=4)


@pytest.fixture(scope="session")
def scenes():
    """A few procedural training scenes at the default resolution."""
    return [gen_scene(seed) for seed in range(3)]


@pytest.fixture
def two_object_scene():
    """Hand-placed bed and table, far enough apart to never touch."""
    return make_scene(
        [
            ("bed_0", "bed", (0.3, 0.3, 0.225), 0.0, 0.45),
            ("table_0", "table", (0.72, 0.7, 0.16), math.pi / 2, 0.32),
        ],
    )


@pytest.fixture
def constant_velocity():
    return ConstantVelocity()


@pytest.fixture
def gaussian_oracle():
    return GaussianOracle(mean=0.25, std=0.5)
