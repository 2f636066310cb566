import pytest
from typing_extensions import override

import voxel_layout.config_names as cn
from voxel_layout.cli import score_scene
from voxel_layout.config import RunConfig
from voxel_layout.exceptions import ConfigError, OrderingError
from voxel_layout.files import CheckpointFile
from voxel_layout.generator import (
    StudentLayoutGenerator,
    TeacherLayoutGenerator,
    create_generator,
)
from voxel_layout.netcore import LayoutDenoiser, ModelConfig

from .conftest import TINY_CONFIG
from .oracles import ScriptedSampler


class ScriptedGenerator(TeacherLayoutGenerator):
    """Teacher generator whose sampler replays prepared latents."""

    scripted: ScriptedSampler

    @override
    def sampler(self):
        return self.scripted


@pytest.fixture
def exact_config():
    return RunConfig({**TINY_CONFIG, cn.CODEC_PATCH: 1})


def _generator(tiny_model, config, spec, counts, stage="teacher"):
    generator = ScriptedGenerator.create(CheckpointFile.from_model(tiny_model, stage, {}), config)
    codec = config.codec()
    generator.scripted = ScriptedSampler([codec.encode(spec.occupancy(count)) for count in counts], evaluations=2)
    return generator


@pytest.mark.parametrize(
    ("stage", "expected"),
    [("teacher", TeacherLayoutGenerator), ("edit", TeacherLayoutGenerator), ("student", StudentLayoutGenerator)],
)
def test_create_generator_dispatches_on_stage(tiny_config, tiny_model, stage, expected):
    generator = create_generator(CheckpointFile.from_model(tiny_model, stage, {}), tiny_config)

    assert type(generator) is expected
    assert generator.stage == stage


def test_unsupported_checkpoints(tiny_config, tiny_model):
    with pytest.raises(ConfigError, match="Unsupported checkpoint stage 'base'"):
        create_generator(CheckpointFile.from_model(tiny_model, "base", {}), tiny_config)

    wide = LayoutDenoiser(ModelConfig(latent_channels=8, width=16, heads=2, layers=1, vocab=64, text_dim=8))
    with pytest.raises(ConfigError, match="latent channels"):
        create_generator(CheckpointFile.from_model(wide, "teacher", {}), tiny_config)


def test_generate_layout(tiny_model, exact_config, two_object_scene):
    generator = _generator(tiny_model, exact_config, two_object_scene, [1, 2])

    result = generator.generate(two_object_scene, seed=4)

    layout = result.layout
    assert layout.scene_id == "hand-000001"
    assert layout.grid_resolution == 16
    assert [p.object_id for p in layout.placements] == ["bed_0", "table_0"]
    assert layout.evaluations == 4
    assert result.rollout.seed == 4
    assert len(result.surface()) > 0


def test_complete_keeps_the_given_objects(tiny_model, exact_config, two_object_scene):
    generator = _generator(tiny_model, exact_config, two_object_scene, [2])

    result = generator.complete(two_object_scene, keep=1)

    assert result.layout.placements[0] == two_object_scene.objects[0].placement
    assert [p.object_id for p in result.layout.placements] == ["bed_0", "table_0"]
    with pytest.raises(OrderingError, match="Cannot keep 2"):
        generator.complete(two_object_scene, keep=2)


def test_remove_needs_an_edit_checkpoint(tiny_model, exact_config, two_object_scene):
    teacher = _generator(tiny_model, exact_config, two_object_scene, [1])
    editor = _generator(tiny_model, exact_config, two_object_scene, [1], stage="edit")

    with pytest.raises(ConfigError, match="edit checkpoint"):
        teacher.remove(two_object_scene, "table_0")
    with pytest.raises(OrderingError, match="no object 'sofa_0'"):
        editor.remove(two_object_scene, "sofa_0")

    result = editor.remove(two_object_scene, "table_0")

    assert [p.object_id for p in result.layout.placements] == ["bed_0"]
    assert result.edit.occupancy.same_cells(two_object_scene.occupancy(1))
    assert result.layout.evaluations == 2


def test_instruction_order_policy(tiny_model, two_object_scene):
    config = RunConfig({**TINY_CONFIG, cn.CODEC_PATCH: 1, cn.ROLLOUT_ORDER: "instruction-order"})
    generator = _generator(tiny_model, config, two_object_scene, [])

    queue = generator.queue([("table_0", "table"), ("bed_0", "bed")], "a table beside a bed")

    assert queue.class_names() == ["table", "bed"]


@pytest.fixture
def patch_config():
    return RunConfig({**TINY_CONFIG, cn.CODEC_PATCH: 2})


def test_generate_procedural_scene_with_two_voxel_patches(tiny_model, patch_config, scenes):
    spec = scenes[0]
    generator = _generator(tiny_model, patch_config, spec, range(1, len(spec) + 1))

    result = generator.generate(spec, seed=1)

    assert [p.object_id for p in result.layout.placements] == [obj.object_id for obj in spec.objects]
    assert result.rollout.state.occupancy.same_cells(spec.occupancy())
    assert score_scene(result.layout, spec, patch_config).psa == 100.0


def test_complete_procedural_scene_with_two_voxel_patches(tiny_model, patch_config, scenes):
    spec = scenes[1]
    generator = _generator(tiny_model, patch_config, spec, range(3, len(spec) + 1))

    result = generator.complete(spec, keep=2)

    assert len(result.layout.placements) == len(spec)
    assert score_scene(result.layout, spec, patch_config).psa == 100.0
