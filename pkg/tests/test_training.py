import pytest

from voxel_layout.exceptions import ConfigError, DataError
from voxel_layout.files import CheckpointFile, load_checkpoint, read_csv
from voxel_layout.training import (
    DISTILL_COLUMNS,
    TRAIN_COLUMNS,
    Stage,
    TrainingData,
    distill_run,
    load_scenes,
    train_stage,
)


def test_training_data_indexes_every_pair(tiny_config, scenes, embedder):
    data = TrainingData(scenes, tiny_config.codec(), embedder)

    assert len(data.pair_index) == sum(len(spec) for spec in scenes)
    sample = data.pair_sample(0)
    removal = data.pair_sample(0, removal=True)
    assert sample.x0.dims == (4, 4, 4)
    assert sample.x0.values.equal(removal.s.values)
    assert len(data.distill_scene(0, objects=2).objects) == 2
    assert len(data.distill_scene(0).objects) == len(scenes[0])
    with pytest.raises(DataError):
        TrainingData([], tiny_config.codec(), embedder)


def test_pipeline(tiny_config, scenes, tmp_path):
    out = tmp_path / "runs"

    base = train_stage(tiny_config, Stage.BASE, out_dir=out, scenes=scenes)
    init = load_checkpoint(base.checkpoint_path)
    teacher = train_stage(tiny_config, "teacher", init=init, out_dir=out, scenes=scenes)

    assert len(base.losses) == 3
    assert all(loss >= 0 for loss in teacher.losses)
    rows = read_csv(base.log_path)
    assert [int(row["step"]) for row in rows] == [0, 1, 2]
    assert set(rows[0]) == set(TRAIN_COLUMNS)
    assert load_checkpoint(teacher.checkpoint_path).stage == "teacher"

    result = distill_run(
        tiny_config,
        load_checkpoint(base.checkpoint_path),
        load_checkpoint(teacher.checkpoint_path),
        out_dir=out,
        scenes=scenes,
    )

    assert len(result.rows) == 2
    assert result.checksums_before == result.checksums_after
    assert set(read_csv(result.log_path)[0]) == set(DISTILL_COLUMNS)
    student = load_checkpoint(result.checkpoint_path)
    assert student.stage == "student"
    assert student.model_config() == teacher.model.config


def test_stage_initialisation_rules(tiny_config, scenes, tiny_model):
    base = CheckpointFile.from_model(tiny_model, "base", {})
    teacher = CheckpointFile.from_model(tiny_model, "teacher", {})

    with pytest.raises(ConfigError, match="none was given"):
        train_stage(tiny_config, Stage.TEACHER, scenes=scenes)
    with pytest.raises(ConfigError, match="got stage teacher"):
        train_stage(tiny_config, Stage.EDIT, init=teacher, scenes=scenes)
    with pytest.raises(ConfigError, match="distill_run"):
        train_stage(tiny_config, Stage.STUDENT, scenes=scenes)
    with pytest.raises(ConfigError, match="Expected a teacher"):
        distill_run(tiny_config, base, base, scenes=scenes)
    with pytest.raises(ConfigError, match="Expected a base"):
        distill_run(tiny_config, teacher, teacher, scenes=scenes)


def test_edit_stage_trains_from_base(tiny_config, scenes, tiny_model):
    base = CheckpointFile.from_model(tiny_model, "base", {})

    result = train_stage(tiny_config, Stage.EDIT, init=base, scenes=scenes)

    assert result.stage == Stage.EDIT
    assert result.checkpoint_path is None
    assert len(result.losses) == 3


def test_load_scenes_needs_a_dataset(tiny_config):
    with pytest.raises(DataError, match="missing"):
        load_scenes(tiny_config)
