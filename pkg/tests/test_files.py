import struct

import numpy as np
import pytest
import torch

from voxel_layout.exceptions import DataError, DecodeError, EncodeError
from voxel_layout.files import (
    CheckpointFile,
    CsvLog,
    DatasetLayout,
    LatentFile,
    Layout,
    OccupancyFile,
    build_manifest,
    catalog_to_dict,
    load_checkpoint,
    ply_text,
    read_binary,
    read_csv,
    read_layout,
    read_scene,
    save_checkpoint,
    write_binary,
    write_csv,
    write_json,
    write_layout,
    write_scene,
)
from voxel_layout.latentcodec import LatentGrid
from voxel_layout.netcore import parameter_checksum
from voxel_layout.registration import Placement
from voxel_layout.scenes import CATALOG
from voxel_layout.voxelgrid import OccupancyGrid, PointCloud


def _corner_grid() -> OccupancyGrid:
    cells = np.zeros((2, 2, 2), dtype=bool)
    cells[0, 0, 0] = True
    return OccupancyGrid(2, cells)


def test_occupancy_file_is_run_length_encoded():
    data = OccupancyFile.from_grid(_corner_grid()).to_bytes()

    assert data == b"LVGOCC1\0\x02" + struct.pack("<BI", 1, 1) + struct.pack("<BI", 0, 7)
    assert OccupancyFile(data).grid.same_cells(_corner_grid())


@pytest.mark.parametrize(
    ("data", "message"),
    [
        (b"NOTOCC1\0\x02", "magic"),
        (b"LVGOCC1", "Truncated"),
        (b"LVGOCC1\0\x02" + struct.pack("<BI", 2, 8), "0 or 1"),
        (b"LVGOCC1\0\x02" + struct.pack("<BI", 1, 9), "overflow"),
        (b"LVGOCC1\0\x02" + struct.pack("<BI", 1, 5), "cover 5 of 8"),
        (b"LVGOCC1\0\x02\x01\x00", "Truncated"),
    ],
)
def test_occupancy_decode_errors(data, message):
    with pytest.raises(DecodeError, match=message):
        OccupancyFile(data)


def test_latent_file():
    latent = LatentGrid(torch.arange(24, dtype=torch.float32).reshape(1, 2, 3, 4))

    data = LatentFile.from_latent(latent).to_bytes()

    assert data[:12] == b"LVGLAT1\0\x01\x02\x03\x04"
    torch.testing.assert_close(LatentFile(data).latent.values, latent.values)
    with pytest.raises(DecodeError, match="expected 96"):
        LatentFile(data[:-4])
    with pytest.raises(EncodeError):
        LatentFile.from_latent(LatentGrid.zeros((256, 1, 1), 1)).to_bytes()


def test_checkpoint_restores_the_model(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "teacher.ckpt", tiny_model, "stepwise", {"seed": "0"})

    checkpoint = load_checkpoint(path)

    assert checkpoint.stage == "stepwise"
    assert checkpoint.config["seed"] == "0"
    assert checkpoint.model_config() == tiny_model.config
    assert parameter_checksum(checkpoint.load_model()) == parameter_checksum(tiny_model)


def test_checkpoint_decode_errors(tiny_model):
    data = CheckpointFile.from_model(tiny_model, "holistic", {}).to_bytes()

    with pytest.raises(DecodeError, match="magic"):
        CheckpointFile(b"X" * 8 + data[8:])
    with pytest.raises(DecodeError, match="version"):
        CheckpointFile(data[:8] + struct.pack("<I", 2) + data[12:])
    with pytest.raises(DecodeError, match="Truncated"):
        CheckpointFile(data[:-4])
    with pytest.raises(EncodeError):
        CheckpointFile.from_model(tiny_model, "holistic", {"bad\nkey": "1"}).to_bytes()


def test_checkpoint_parameters_must_match_the_config(tiny_model):
    checkpoint = CheckpointFile.from_model(tiny_model, "holistic", {})
    checkpoint.tensors.pop("output_proj.bias")

    with pytest.raises(DataError, match="do not match"):
        checkpoint.load_model()


def test_missing_files_are_data_errors(tmp_path):
    with pytest.raises(DataError, match="Cannot read"):
        read_binary(tmp_path / "missing.lvgocc", OccupancyFile)
    with pytest.raises(DataError, match="Cannot read"):
        read_layout(tmp_path / "missing.json")


def test_layout_document(tmp_path):
    layout = Layout(
        "test-200000",
        16,
        "a bed",
        (
            Placement("bed_0", "bed", (0.3, 0.3, 0.2), 0.5, 0.45),
            Placement("lamp_0", "lamp", (0.3, 0.3, 0.5), -1.0, 0.12),
        ),
        seconds=1.5,
        evaluations=12,
    )

    document = layout.to_dict()
    path = write_layout(tmp_path / "layout.json", layout)

    assert [item["order_index"] for item in document["objects"]] == [1, 2]
    assert document["objects"][0]["position"] == [0.3, 0.3, 0.2]
    assert read_layout(path) == layout


def test_layout_objects_follow_the_order_index():
    document = Layout("s", 16, "x", (Placement("a", "bed", (0.5, 0.5, 0.2), 0.0, 0.4),)).to_dict()
    second = {**document["objects"][0], "id": "b", "order_index": 0}
    document["objects"].append(second)

    assert [p.object_id for p in Layout.from_dict(document).placements] == ["b", "a"]


def test_malformed_layout(tmp_path):
    path = write_json(tmp_path / "layout.json", {"scene_id": "s", "objects": []})

    with pytest.raises(DataError, match="Malformed layout"):
        read_layout(path)


def test_scene_document(tmp_path, scenes):
    spec = scenes[0]

    restored = read_scene(write_scene(tmp_path / "scene.json", spec))

    assert restored == spec
    assert restored.occupancy().same_cells(spec.occupancy())


def test_scene_with_unknown_class(tmp_path, scenes):
    path = write_scene(tmp_path / "scene.json", scenes[0])
    text = path.read_text(encoding="utf-8").replace(f'"{scenes[0].objects[0].class_name}"', '"piano"')
    path.write_text(text, encoding="utf-8")

    with pytest.raises(DataError, match="piano"):
        read_scene(path)


def test_catalog_document():
    document = catalog_to_dict(CATALOG)

    assert [item["name"] for item in document["classes"]] == sorted(CATALOG)
    lamp = next(item for item in document["classes"] if item["name"] == "lamp")
    assert lamp["support"] == "surface"


def test_manifest_checksum_covers_every_file(tmp_path, scenes):
    layout = DatasetLayout(tmp_path)
    write_json(layout.catalog, catalog_to_dict(CATALOG))
    spec = scenes[0]
    write_scene(layout.scene("train", spec.scene_id), spec)
    write_binary(layout.occupancy("train", spec.scene_id), OccupancyFile.from_grid(spec.occupancy()))
    splits = {"train": {"seeds": [0, 1], "scene_ids": [spec.scene_id]}}

    manifest = build_manifest(tmp_path, splits)
    write_json(layout.manifest, manifest)

    assert layout.scene_ids("train") == [spec.scene_id]
    assert layout.load_split("train") == [spec]
    layout.occupancy("train", spec.scene_id).write_bytes(OccupancyFile.from_grid(OccupancyGrid.empty(16)).to_bytes())
    assert build_manifest(tmp_path, splits)["checksum"] != manifest["checksum"]
    with pytest.raises(DataError, match="no split"):
        layout.scene_ids("val")


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError, match="manifest.json is missing"):
        DatasetLayout(tmp_path).load_split("train")


def test_csv_log(tmp_path):
    path = tmp_path / "logs" / "train.csv"

    with CsvLog(path, ["step", "loss"]) as log:
        log.write({"step": 1, "loss": 0.5})
        log.write({"step": 2})

    assert read_csv(path) == [{"step": "1", "loss": "0.5"}, {"step": "2", "loss": ""}]
    with pytest.raises(RuntimeError, match="not open"):
        log.write({"step": 3})


def test_write_csv(tmp_path):
    path = write_csv(tmp_path / "metrics.csv", ["scene_id"], [{"scene_id": "a"}, {"scene_id": "b"}])

    assert [row["scene_id"] for row in read_csv(path)] == ["a", "b"]


def test_ply_text():
    text = ply_text(PointCloud(np.array([[0.0, 0.5, 1.0]])))

    assert "element vertex 1" in text
    assert text.endswith("end_header\n0.000000 0.500000 1.000000\n")
