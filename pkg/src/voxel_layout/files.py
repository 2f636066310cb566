"""File formats: occupancy and latent grids, checkpoints, layouts, scenes and logs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from types import TracebackType
from typing import Any

import numpy as np
import torch
from torch import nn

from .exceptions import DataError, DecodeError, EncodeError
from .latentcodec import LatentGrid
from .metrics import Room
from .netcore import LayoutDenoiser, ModelConfig
from .registration import Placement
from .scenes import CATALOG, Catalog, Relation, SceneObject, SceneSpec
from .voxelgrid import Frame, OccupancyGrid, PointCloud

_LOGGER = logging.getLogger(__name__)


def _unpack(fmt: str, data: bytes, offset: int, what: str) -> tuple:
    try:
        return struct.unpack_from(fmt, data, offset)
    except struct.error as err:
        raise DecodeError(f"Truncated {what} at byte {offset}") from err


class OccupancyFile:
    """Run-length encoded occupancy grid."""

    MAGIC = b"LVGOCC1\0"
    HEADER = "<8sB"
    RUN = "<BI"

    def __init__(self, file_data: bytes, frame: Frame = Frame.SCENE):
        """Create an OccupancyFile from its byte representation."""
        magic, resolution = _unpack(self.HEADER, file_data, 0, "occupancy header")
        if magic != self.MAGIC:
            raise DecodeError(f"Bad occupancy magic {magic!r}")
        if resolution < 1:
            raise DecodeError("Occupancy resolution must be positive")

        total = resolution**3
        cells = np.zeros(total, dtype=bool)
        offset = struct.calcsize(self.HEADER)
        position = 0
        while offset < len(file_data):
            value, length = _unpack(self.RUN, file_data, offset, "occupancy run")
            offset += struct.calcsize(self.RUN)
            if value > 1:
                raise DecodeError(f"Occupancy run value must be 0 or 1, got {value}")
            if position + length > total:
                raise DecodeError(f"Occupancy runs overflow the {resolution}^3 grid")
            cells[position : position + length] = bool(value)
            position += length
        if position != total:
            raise DecodeError(f"Occupancy runs cover {position} of {total} cells")

        self.grid = OccupancyGrid(resolution, cells.reshape(resolution, resolution, resolution), frame)

    @classmethod
    def from_grid(cls, grid: OccupancyGrid) -> OccupancyFile:
        """Wrap a grid."""
        instance = cls.__new__(cls)
        instance.grid = grid
        return instance

    def to_bytes(self) -> bytes:
        """Byte representation."""
        if self.grid.resolution > 255:  # noqa: PLR2004
            raise EncodeError(f"Resolution {self.grid.resolution} does not fit in one byte")
        flat = self.grid.cells.reshape(-1)
        result = bytearray(struct.pack(self.HEADER, self.MAGIC, self.grid.resolution))
        boundaries = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [len(flat)]])
        for start, end in zip(starts, ends, strict=True):
            result += struct.pack(self.RUN, int(flat[start]), int(end - start))
        return bytes(result)


class LatentFile:
    """Dense latent grid of little-endian float32 values."""

    MAGIC = b"LVGLAT1\0"
    HEADER = "<8s4B"
    VALUE = "<f4"

    def __init__(self, file_data: bytes):
        """Create a LatentFile from its byte representation."""
        magic, h, w, l, d = _unpack(self.HEADER, file_data, 0, "latent header")
        if magic != self.MAGIC:
            raise DecodeError(f"Bad latent magic {magic!r}")
        offset = struct.calcsize(self.HEADER)
        expected = h * w * l * d * np.dtype(self.VALUE).itemsize
        if len(file_data) - offset != expected:
            raise DecodeError(f"Latent body holds {len(file_data) - offset} bytes, expected {expected}")
        values = np.frombuffer(file_data, dtype=self.VALUE, offset=offset).reshape(h, w, l, d)
        self.latent = LatentGrid(torch.from_numpy(values.astype(np.float32)))

    @classmethod
    def from_latent(cls, latent: LatentGrid) -> LatentFile:
        """Wrap a latent."""
        instance = cls.__new__(cls)
        instance.latent = latent
        return instance

    def to_bytes(self) -> bytes:
        """Byte representation."""
        dims = (*self.latent.dims, self.latent.channels)
        if max(dims) > 255:  # noqa: PLR2004
            raise EncodeError(f"Latent dims {dims} do not fit in one byte each")
        values = self.latent.values.detach().cpu().numpy().astype(self.VALUE)
        return struct.pack(self.HEADER, self.MAGIC, *dims) + values.tobytes()


class CheckpointFile:
    """Model parameters plus the configuration block they were trained with."""

    MAGIC = b"LVGCKPT1"
    VERSION = 1

    HEADER = "<8sI"
    CONFIG_LENGTH = "<I"
    NAME_LENGTH = "<H"
    RANK = "<B"
    DIM = "<I"
    VALUE = "<f4"

    STAGE_KEY = "stage"

    def __init__(self, file_data: bytes):
        """Create a CheckpointFile from its byte representation."""
        magic, self.version = _unpack(self.HEADER, file_data, 0, "checkpoint header")
        if magic != self.MAGIC:
            raise DecodeError(f"Bad checkpoint magic {magic!r}")
        if self.version != self.VERSION:
            raise DecodeError(f"Unsupported checkpoint version {self.version}")
        offset = struct.calcsize(self.HEADER)

        (config_length,) = _unpack(self.CONFIG_LENGTH, file_data, offset, "config length")
        offset += struct.calcsize(self.CONFIG_LENGTH)
        block = file_data[offset : offset + config_length]
        if len(block) != config_length:
            raise DecodeError("Truncated checkpoint config block")
        offset += config_length
        self.config: dict[str, str] = {}
        for line in block.decode("utf-8").splitlines():
            if line:
                key, _, value = line.partition("=")
                self.config[key] = value

        self.tensors: dict[str, torch.Tensor] = {}
        while offset < len(file_data):
            (name_length,) = _unpack(self.NAME_LENGTH, file_data, offset, "tensor name length")
            offset += struct.calcsize(self.NAME_LENGTH)
            name = file_data[offset : offset + name_length].decode("utf-8")
            offset += name_length
            (rank,) = _unpack(self.RANK, file_data, offset, f"rank of {name}")
            offset += struct.calcsize(self.RANK)
            dims = _unpack(f"<{rank}I", file_data, offset, f"dims of {name}")
            offset += struct.calcsize(f"<{rank}I")
            size = int(np.prod(dims, dtype=np.int64)) * np.dtype(self.VALUE).itemsize
            if offset + size > len(file_data):
                raise DecodeError(f"Truncated data of tensor {name}")
            values = np.frombuffer(file_data, dtype=self.VALUE, count=size // 4, offset=offset)
            self.tensors[name] = torch.from_numpy(values.astype(np.float32).reshape(dims))
            offset += size

    @classmethod
    def from_model(cls, model: nn.Module, stage: str, config: Mapping[str, str]) -> CheckpointFile:
        """Snapshot a model; `config` is stored next to the model's own hyperparameters."""
        instance = cls.__new__(cls)
        instance.version = cls.VERSION
        model_config: dict[str, str] = model.config.as_strings() if isinstance(model, LayoutDenoiser) else {}
        instance.config = {**config, **model_config, cls.STAGE_KEY: stage}
        instance.tensors = {name: tensor.detach().cpu().float() for name, tensor in model.state_dict().items()}
        return instance

    @property
    def stage(self) -> str:
        """Training stage that produced the checkpoint."""
        try:
            return self.config[self.STAGE_KEY]
        except KeyError as err:
            raise DataError("Checkpoint has no stage entry") from err

    def model_config(self) -> ModelConfig:
        """Denoiser hyperparameters stored in the checkpoint."""
        return ModelConfig.from_strings(self.config)

    def load_model(self, dtype: torch.dtype = torch.float32) -> LayoutDenoiser:
        """Rebuild the denoiser and load its parameters."""
        model = LayoutDenoiser(self.model_config())
        try:
            model.load_state_dict(self.tensors)
        except RuntimeError as err:
            raise DataError(f"Checkpoint parameters do not match the stored model config: {err}") from err
        return model.to(dtype)

    def to_bytes(self) -> bytes:
        """Byte representation."""
        for key, value in self.config.items():
            if "=" in key or "\n" in key or "\n" in value:
                raise EncodeError(f"Config entry {key!r} cannot be stored as a key=value line")
        block = "".join(f"{key}={value}\n" for key, value in sorted(self.config.items())).encode("utf-8")
        result = bytearray(struct.pack(self.HEADER, self.MAGIC, self.version))
        result += struct.pack(self.CONFIG_LENGTH, len(block)) + block
        for name, tensor in self.tensors.items():
            encoded = name.encode("utf-8")
            dims = tuple(tensor.shape)
            result += struct.pack(self.NAME_LENGTH, len(encoded)) + encoded
            result += struct.pack(self.RANK, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
            result += tensor.detach().cpu().numpy().astype(self.VALUE).tobytes()
        return bytes(result)


def read_binary(path: Path | str, file_class: type[Any]) -> Any:
    """Parse a binary file, turning a missing file into DataError."""
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"Cannot read {path}: {err}") from err
    return file_class(data)


def write_binary(path: Path | str, file: OccupancyFile | LatentFile | CheckpointFile) -> Path:
    """Write a binary file, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(file.to_bytes())
    return path


def load_checkpoint(path: Path | str) -> CheckpointFile:
    """Read a checkpoint file."""
    return read_binary(path, CheckpointFile)


def save_checkpoint(path: Path | str, model: nn.Module, stage: str, config: Mapping[str, str]) -> Path:
    """Write a model checkpoint."""
    path = write_binary(path, CheckpointFile.from_model(model, stage, config))
    _LOGGER.info("Wrote %s checkpoint to %s", stage, path)
    return path


#####
# PLY
#####


def ply_text(cloud: PointCloud) -> str:
    """ASCII PLY with one vertex line per point."""
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    lines = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in cloud.points]
    return "\n".join(header + lines) + "\n"


def write_ply(path: Path | str, cloud: PointCloud) -> Path:
    """Write a point cloud as ASCII PLY."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ply_text(cloud), encoding="utf-8")
    return path


##########
# Layouts
##########


@dataclass(frozen=True)
class Layout:
    """Generated object placements of one scene."""

    scene_id: str
    grid_resolution: int
    instruction: str
    placements: tuple[Placement, ...]
    seconds: float = 0.0
    evaluations: int = 0

    def to_dict(self) -> dict[str, Any]:
        """JSON document."""
        return {
            "scene_id": self.scene_id,
            "grid_resolution": self.grid_resolution,
            "instruction": self.instruction,
            "objects": [
                _placement_dict(placement, index) for index, placement in enumerate(self.placements, start=1)
            ],
            "seconds": self.seconds,
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> Layout:
        """Parse a layout document."""
        try:
            objects = sorted(document["objects"], key=lambda item: item["order_index"])
            return cls(
                scene_id=str(document["scene_id"]),
                grid_resolution=int(document["grid_resolution"]),
                instruction=str(document["instruction"]),
                placements=tuple(_placement_from_dict(item) for item in objects),
                seconds=float(document.get("seconds", 0.0)),
                evaluations=int(document.get("evaluations", 0)),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DataError(f"Malformed layout document: {err}") from err


def _placement_dict(placement: Placement, order_index: int) -> dict[str, Any]:
    return {
        "id": placement.object_id,
        "class": placement.class_name,
        "position": [float(value) for value in placement.translation],
        "yaw": float(placement.yaw),
        "scale": float(placement.scale),
        "order_index": order_index,
    }


def _placement_from_dict(item: Mapping[str, Any]) -> Placement:
    x, y, z = (float(value) for value in item["position"])
    return Placement(str(item["id"]), str(item["class"]), (x, y, z), float(item["yaw"]), float(item["scale"]))


def write_json(path: Path | str, document: Any) -> Path:
    """Write a JSON document with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path | str) -> Any:
    """Read a JSON document."""
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"Cannot read {path}: {err}") from err


def write_layout(path: Path | str, layout: Layout) -> Path:
    """Write a layout JSON file."""
    return write_json(path, layout.to_dict())


def read_layout(path: Path | str) -> Layout:
    """Read a layout JSON file."""
    return Layout.from_dict(read_json(path))


#########
# Scenes
#########


def scene_to_dict(spec: SceneSpec) -> dict[str, Any]:
    """SceneSpec document: the layout schema plus seed, room bounds and relations."""
    objects = []
    for index, obj in enumerate(spec.objects, start=1):
        item = _placement_dict(obj.placement, index)
        item["relation"] = str(obj.relation)
        item["anchor"] = obj.anchor_id
        objects.append(item)
    return {
        "scene_id": spec.scene_id,
        "seed": spec.seed,
        "room_type": spec.room_type,
        "grid_resolution": spec.resolution,
        "instruction": spec.instruction,
        "room": {"lower": list(spec.room.lower), "upper": list(spec.room.upper)},
        "objects": objects,
    }


def scene_from_dict(document: Mapping[str, Any], catalog: Catalog = CATALOG) -> SceneSpec:
    """Parse a SceneSpec document."""
    try:
        items = sorted(document["objects"], key=lambda item: item["order_index"])
        objects = tuple(
            SceneObject(
                str(item["id"]),
                str(item["class"]),
                _placement_from_dict(item),
                Relation(item.get("relation", Relation.FREE)),
                item.get("anchor"),
            )
            for item in items
        )
        unknown = sorted({obj.class_name for obj in objects if obj.class_name not in catalog})
        if unknown:
            raise DataError(f"Scene {document['scene_id']} uses unknown classes {unknown}")
        room = document["room"]
        return SceneSpec(
            scene_id=str(document["scene_id"]),
            seed=int(document["seed"]),
            room_type=str(document["room_type"]),
            room=Room(tuple(room["lower"]), tuple(room["upper"])),
            objects=objects,
            instruction=str(document["instruction"]),
            resolution=int(document["grid_resolution"]),
            catalog=catalog,
        )
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"Malformed scene document: {err}") from err


def write_scene(path: Path | str, spec: SceneSpec) -> Path:
    """Write a SceneSpec JSON file."""
    return write_json(path, scene_to_dict(spec))


def read_scene(path: Path | str, catalog: Catalog = CATALOG) -> SceneSpec:
    """Read a SceneSpec JSON file."""
    return scene_from_dict(read_json(path), catalog)


def catalog_to_dict(catalog: Catalog) -> dict[str, Any]:
    """Catalog document, classes in name order."""
    return {
        "classes": [
            {
                "name": cls.name,
                "support": str(cls.support),
                "symmetry": cls.symmetry,
                "lattice": cls.lattice,
                "scale": cls.scale,
                "parts": [
                    {"center": list(part.center), "half_extents": list(part.half_extents), "yaw": part.yaw}
                    for part in cls.parts
                ],
            }
            for cls in (catalog[name] for name in sorted(catalog))
        ],
    }


##########
# Dataset
##########


class DatasetLayout:
    """Paths inside a dataset directory."""

    CATALOG = "catalog.json"
    MANIFEST = "manifest.json"
    SCENES = "scenes"
    OCCUPANCY_SUFFIX = ".lvgocc"

    def __init__(self, root: Path | str):
        """Create DatasetLayout."""
        self.root = Path(root)

    @property
    def catalog(self) -> Path:
        """Catalog document."""
        return self.root / self.CATALOG

    @property
    def manifest(self) -> Path:
        """Manifest document."""
        return self.root / self.MANIFEST

    def scene(self, split: str, scene_id: str) -> Path:
        """SceneSpec document of a scene."""
        return self.root / self.SCENES / split / f"{scene_id}.json"

    def occupancy(self, split: str, scene_id: str) -> Path:
        """Cached final occupancy of a scene."""
        return self.root / self.SCENES / split / f"{scene_id}{self.OCCUPANCY_SUFFIX}"

    def scene_ids(self, split: str) -> list[str]:
        """Scene ids recorded in the manifest for a split."""
        manifest = read_json(self.manifest)
        try:
            return list(manifest["splits"][split]["scene_ids"])
        except (KeyError, TypeError) as err:
            raise DataError(f"Manifest {self.manifest} has no split {split!r}") from err

    def load_split(self, split: str, catalog: Catalog = CATALOG) -> list[SceneSpec]:
        """Every scene of a split in manifest order."""
        if not self.manifest.exists():
            raise DataError(f"No dataset at {self.root}: {self.MANIFEST} is missing")
        return [read_scene(self.scene(split, scene_id), catalog) for scene_id in self.scene_ids(split)]


def file_digest(path: Path | str) -> str:
    """SHA-256 of a file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_manifest(root: Path | str, splits: Mapping[str, Mapping[str, Any]]) -> dict[str, Any]:
    """Manifest of a dataset directory with a checksum over every file it lists.

    `splits` maps a split name to its `seeds` range description and `scene_ids`.
    """
    layout = DatasetLayout(root)
    digest = hashlib.sha256()
    files = [layout.catalog]
    for split, entry in sorted(splits.items()):
        for scene_id in entry["scene_ids"]:
            files.extend((layout.scene(split, scene_id), layout.occupancy(split, scene_id)))
    for path in files:
        digest.update(path.relative_to(layout.root).as_posix().encode("utf-8"))
        digest.update(bytes.fromhex(file_digest(path)))
    return {"splits": {name: dict(entry) for name, entry in sorted(splits.items())}, "checksum": digest.hexdigest()}


######
# CSV
######


class CsvLog:
    """CSV file with a fixed header, flushed after every row."""

    def __init__(self, path: Path | str, columns: Sequence[str]):
        """Create CsvLog; the file is created on enter."""
        self.path = Path(path)
        self.columns = tuple(columns)
        self._handle = None
        self._writer: csv.DictWriter | None = None

    def __enter__(self) -> CsvLog:
        """Open the file and write the header."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._handle, fieldnames=self.columns)
        self._writer.writeheader()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_value: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        """Close the file."""
        if self._handle is not None:
            self._handle.close()
        self._handle = None
        self._writer = None

    def write(self, row: Mapping[str, Any]) -> None:
        """Append one row."""
        if self._writer is None or self._handle is None:
            raise RuntimeError("CsvLog is not open")
        self._writer.writerow({column: row.get(column, "") for column in self.columns})
        self._handle.flush()


def write_csv(path: Path | str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    """Write rows to a CSV file."""
    with CsvLog(path, columns) as log:
        for row in rows:
            log.write(row)
    return Path(path)


def read_csv(path: Path | str) -> list[dict[str, str]]:
    """Read a CSV file into dict rows."""
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))
    except OSError as err:
        raise DataError(f"Cannot read {path}: {err}") from err


def write_resolved_config(directory: Path | str, text: str) -> Path:
    """Store the resolved run configuration next to a command's outputs."""
    path = Path(directory) / "config.resolved"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
