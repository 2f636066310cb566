"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Collection, Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, TypeVar

from . import config_names as cn
from .config import RunConfig
from .const import SCENE_LATTICE
from .exceptions import (
    ConfigError,
    DataError,
    EditError,
    NumericalError,
    OrderingError,
    RolloutError,
    SceneGenerationError,
    VoxelLayoutException,
)
from .files import (
    DatasetLayout,
    Layout,
    OccupancyFile,
    build_manifest,
    catalog_to_dict,
    load_checkpoint,
    read_csv,
    read_layout,
    scene_to_dict,
    write_csv,
    write_json,
    write_layout,
    write_ply,
    write_resolved_config,
)
from .generator import create_generator
from .metrics import ScoreReport, score_layout, summarize
from .scenes import CATALOG, SceneSpec, Split, gen_long_scene, gen_scene, split_seeds
from .training import Stage, distill_run, load_scenes, train_stage

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_FAILURE = 1

SCORE_COLUMNS = ("scene_id", "cf", "ib", "pos", "rot", "psa", "seconds")
FAILURE_COLUMNS = ("scene_id", "step", "placed", "error")
FAILURES_FILE = "failures.csv"

# per-scene failures that skip the scene instead of ending the run
SCENE_ERRORS = (RolloutError, EditError, OrderingError)

T = TypeVar("T")
R = TypeVar("R")


def _fan_out(function: Callable[[T], R], items: Iterable[T], jobs: int) -> list[R]:
    """Map over a worker pool; results keep the input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(function, items))


##########
# gen-data
##########


def _scene_job(job: tuple[str, int, int]) -> tuple[str, int, dict[str, Any] | None, bytes, str]:
    split, seed, resolution = job
    try:
        spec = gen_scene(seed, resolution=resolution, split=split)
    except SceneGenerationError as err:
        return split, seed, None, b"", str(err)
    return split, seed, scene_to_dict(spec), OccupancyFile.from_grid(spec.occupancy()).to_bytes(), ""


def cmd_gen_data(config: RunConfig, jobs: int = 1) -> Path:
    """Generate the train/val/test scene corpus."""
    layout = DatasetLayout(config.data_dir)
    if layout.root.exists() and not layout.root.is_dir():
        raise DataError(f"Dataset path {layout.root} exists and is not a directory")
    if layout.manifest.exists() and not layout.manifest.is_file():
        raise DataError(f"Dataset path {layout.root} is corrupt: {layout.manifest.name} is not a file")
    layout.root.mkdir(parents=True, exist_ok=True)
    write_json(layout.catalog, catalog_to_dict(CATALOG))
    if (config.resolution * SCENE_LATTICE / config[cn.CODEC_PATCH]) % 1:
        _LOGGER.warning(
            "Scene lattice %s is not a whole number of %d-voxel patches at resolution %d; "
            "objects will not survive the codec round trip exactly",
            SCENE_LATTICE,
            config[cn.CODEC_PATCH],
            config.resolution,
        )

    counts = {Split.TRAIN: config[cn.DATA_TRAIN], Split.VAL: config[cn.DATA_VAL], Split.TEST: config[cn.DATA_TEST]}
    jobs_list = [
        (str(split), seed, config.resolution) for split, count in counts.items() for seed in split_seeds(split, count)
    ]
    splits: dict[str, dict[str, Any]] = {
        str(split): {
            "seeds": [split.seed_start, split.seed_start + count],
            "scene_ids": [],
            "failed_seeds": [],
        }
        for split, count in counts.items()
    }

    for split, seed, document, occupancy, error in _fan_out(_scene_job, jobs_list, jobs):
        if document is None:
            _LOGGER.warning("Skipping %s scene with seed %d: %s", split, seed, error)
            splits[split]["failed_seeds"].append(seed)
            continue
        scene_id = document["scene_id"]
        write_json(layout.scene(split, scene_id), document)
        path = layout.occupancy(split, scene_id)
        path.write_bytes(occupancy)
        splits[split]["scene_ids"].append(scene_id)

    manifest = build_manifest(layout.root, splits)
    write_json(layout.manifest, manifest)
    write_resolved_config(layout.root, config.dumps())
    _LOGGER.info(
        "Generated %s scenes in %s (checksum %s)",
        ", ".join(f"{len(entry['scene_ids'])} {name}" for name, entry in splits.items()),
        layout.root,
        manifest["checksum"],
    )
    return layout.root


#######
# train
#######


def cmd_train(config: RunConfig, stage: Stage, init: Path | None = None) -> Path:
    """Train one flow-matching stage; teacher and edit start from the base checkpoint."""
    out = config.out_dir
    if stage != Stage.BASE:
        init = init or out / f"{Stage.BASE}.ckpt"
        if not init.exists():
            raise ConfigError(f"Stage {stage} needs a base checkpoint, {init} does not exist")
    checkpoint = load_checkpoint(init) if init is not None else None
    write_resolved_config(out, config.dumps())
    result = train_stage(config, stage, config.data_dir, checkpoint, out)
    if result.losses:
        _LOGGER.info("Stage %s loss %.5f -> %.5f", stage, result.losses[0], result.losses[-1])
    return result.checkpoint_path  # type: ignore[return-value]


def cmd_distill(config: RunConfig, base: Path | None = None, teacher: Path | None = None) -> Path:
    """Distill the teacher into the few-step student."""
    if not (config[cn.DISTILL_STEP_LOSS] or config[cn.DISTILL_HOLISTIC_LOSS]):
        raise ConfigError("--no-step-loss and --no-holistic-loss cannot be combined")
    out = config.out_dir
    base = base or out / f"{Stage.BASE}.ckpt"
    teacher = teacher or out / f"{Stage.TEACHER}.ckpt"
    for path in (base, teacher):
        if not path.exists():
            raise ConfigError(f"Distillation needs {path}")
    write_resolved_config(out, config.dumps())
    result = distill_run(config, load_checkpoint(base), load_checkpoint(teacher), config.data_dir, out)
    return result.checkpoint_path  # type: ignore[return-value]


####################
# generate/complete/edit
####################


def _test_scenes(config: RunConfig, split: Split, limit: int | None, long_objects: int | None) -> list[SceneSpec]:
    if long_objects:
        return [gen_long_scene(config[cn.SEED], long_objects, resolution=config.resolution)]
    scenes = load_scenes(config, split=split)
    return scenes[:limit] if limit else scenes


def _write_outputs(out: Path, layout: Layout, surface=None, suffix: str = "") -> None:
    write_layout(out / "layouts" / f"{layout.scene_id}{suffix}.json", layout)
    if surface is not None:
        write_ply(out / "ply" / f"{layout.scene_id}{suffix}.ply", surface)


def _failure(spec: SceneSpec, err: VoxelLayoutException, action: str) -> dict[str, Any]:
    _LOGGER.exception("%s failed for scene %s, skipping it", action, spec.scene_id)
    placements = err.placements if isinstance(err, RolloutError) else []
    step = err.index if isinstance(err, RolloutError) and err.index is not None else ""
    return {"scene_id": spec.scene_id, "step": step, "placed": len(placements), "error": str(err)}


def _finish_scenes(out: Path, layouts: list[Layout], failures: list[dict[str, Any]], action: str) -> list[Layout]:
    """Record the skipped scenes next to the layouts; fail only when no scene succeeded."""
    if failures:
        path = write_csv(out / "layouts" / FAILURES_FILE, FAILURE_COLUMNS, failures)
        _LOGGER.warning("%s failed for %d scenes, see %s", action, len(failures), path)
        if not layouts:
            raise RolloutError(f"{action} failed for every scene: {failures[0]['error']}")
    _LOGGER.info("Wrote %d layouts to %s", len(layouts), out / "layouts")
    return layouts


def cmd_generate(  # noqa: PLR0913
    config: RunConfig,
    model: Path,
    *,
    split: Split = Split.TEST,
    limit: int | None = None,
    ply: bool = False,
    long_objects: int | None = None,
) -> list[Layout]:
    """Generate a layout for every scene of a split from its instruction and object set.

    A scene whose rollout fails is skipped and listed in layouts/failures.csv.
    """
    generator = create_generator(load_checkpoint(model), config)
    out = config.out_dir
    write_resolved_config(out, config.dumps())
    diversity = config[cn.ROLLOUT_DIVERSITY]
    layouts: list[Layout] = []
    failures: list[dict[str, Any]] = []
    for spec in _test_scenes(config, split, limit, long_objects):
        try:
            results = generator.generate_diverse(spec, diversity)
        except SCENE_ERRORS as err:
            failures.append(_failure(spec, err, "Generation"))
            continue
        for index, result in enumerate(results):
            suffix = f"-k{index}" if diversity > 1 else ""
            _write_outputs(out, result.layout, result.surface() if ply else None, suffix)
            layouts.append(result.layout)
    return _finish_scenes(out, layouts, failures, "Generation")


def cmd_complete(  # noqa: PLR0913
    config: RunConfig,
    model: Path,
    keep: int,
    *,
    split: Split = Split.TEST,
    limit: int | None = None,
    ply: bool = False,
) -> list[Layout]:
    """Complete scenes of which the first `keep` objects are given."""
    generator = create_generator(load_checkpoint(model), config)
    out = config.out_dir
    write_resolved_config(out, config.dumps())
    layouts: list[Layout] = []
    failures: list[dict[str, Any]] = []
    for spec in _test_scenes(config, split, limit, None):
        if keep >= len(spec):
            _LOGGER.warning("Scene %s has only %d objects, nothing to complete", spec.scene_id, len(spec))
            continue
        try:
            result = generator.complete(spec, keep)
        except SCENE_ERRORS as err:
            failures.append(_failure(spec, err, "Completion"))
            continue
        _write_outputs(out, result.layout, result.surface() if ply else None)
        layouts.append(result.layout)
    return _finish_scenes(out, layouts, failures, "Completion")


def cmd_edit(  # noqa: PLR0913
    config: RunConfig,
    model: Path,
    object_id: str | None = None,
    *,
    split: Split = Split.TEST,
    limit: int | None = None,
    ply: bool = False,
) -> list[Layout]:
    """Remove one object (default: the last placed one) from each scene."""
    generator = create_generator(load_checkpoint(model), config)
    out = config.out_dir
    write_resolved_config(out, config.dumps())
    layouts: list[Layout] = []
    failures: list[dict[str, Any]] = []
    for spec in _test_scenes(config, split, limit, None):
        target = object_id or spec.objects[-1].object_id
        try:
            result = generator.remove(spec, target)
        except SCENE_ERRORS as err:
            failures.append(_failure(spec, err, "Removal"))
            continue
        _write_outputs(out, result.layout, result.surface() if ply else None)
        layouts.append(result.layout)
    return _finish_scenes(out, layouts, failures, "Removal")


######
# eval
######


def score_scene(layout: Layout, spec: SceneSpec, config: RunConfig) -> ScoreReport:
    """Score one layout against its ground-truth scene."""
    generated = sorted(p.object_id for p in layout.placements)
    expected = sorted(obj.object_id for obj in spec.objects)
    if generated != expected:
        missing = sorted(set(expected) - set(generated))
        extra = sorted(set(generated) - set(expected))
        raise DataError(f"Scene {spec.scene_id}: missing objects {missing}, unexpected objects {extra}")
    boxes = [spec.catalog[p.class_name].box(p) for p in layout.placements]
    return score_layout(
        layout.placements,
        boxes,
        spec.room,
        config.tolerance,
        ground_truth=spec.ground_truth(),
        symmetry_orders=spec.catalog.symmetry_orders(),
        pos_threshold=config[cn.METRICS_POS_THRESHOLD],
        yaw_threshold=config.yaw_threshold,
        seconds=layout.seconds,
    )


def _score_job(job: tuple[Layout, SceneSpec, RunConfig]) -> ScoreReport:
    return score_scene(*job)


def evaluate(
    layouts: Mapping[str, Layout],
    scenes: Sequence[SceneSpec],
    config: RunConfig,
    jobs: int = 1,
    failed: Collection[str] = (),
) -> tuple[list[dict[str, Any]], dict[str, Any]]:
    """Per-scene score rows and the bootstrap summary over the scenes within the object-count filter.

    Scenes listed in `failed` had no layout generated; they are left out of the scores and counted
    in the summary.
    """
    low, high = config[cn.METRICS_MIN_OBJECTS], config[cn.METRICS_MAX_OBJECTS]
    within = [spec for spec in scenes if low <= len(spec) <= high]
    if not within:
        raise DataError(f"No ground-truth scene has between {low} and {high} objects")
    selected = [spec for spec in within if spec.scene_id not in failed]
    if not layouts or not selected:
        raise DataError("No layouts to evaluate")

    expected = {spec.scene_id for spec in selected}
    missing = sorted(expected - set(layouts))
    if missing:
        raise DataError(f"No layout for scenes {missing}")
    unknown = sorted(set(layouts) - {spec.scene_id for spec in scenes})
    if unknown:
        raise DataError(f"Layouts without ground truth: {unknown}")

    reports = _fan_out(_score_job, [(layouts[spec.scene_id], spec, config) for spec in selected], jobs)
    rows = [report.as_row(spec.scene_id) for report, spec in zip(reports, selected, strict=True)]
    summary = summarize(reports, config[cn.METRICS_BOOTSTRAP], config[cn.SEED])
    summary["object_filter"] = [low, high]
    summary["failed_scenes"] = sorted(spec.scene_id for spec in within if spec.scene_id in failed)
    return rows, summary


def cmd_eval(config: RunConfig, layouts_dir: Path, split: Split = Split.TEST, jobs: int = 1) -> dict[str, Any]:
    """Score generated layouts against the ground truth of a split."""
    paths = sorted(Path(layouts_dir).glob("*.json"))
    layouts = {}
    for path in paths:
        layout = read_layout(path)
        layouts[layout.scene_id] = layout
    failures = Path(layouts_dir) / FAILURES_FILE
    failed = {row["scene_id"] for row in read_csv(failures)} if failures.is_file() else set()
    rows, summary = evaluate(layouts, load_scenes(config, split=split), config, jobs, failed)
    out = config.out_dir
    write_csv(out / "scores.csv", SCORE_COLUMNS, rows)
    write_json(out / "summary.json", summary)
    write_resolved_config(out, config.dumps())
    _LOGGER.info(
        "Scored %d scenes: cf %.1f, ib %.1f, psa %.1f",
        summary["scenes"],
        summary["cf"]["mean"],
        summary["ib"]["mean"],
        summary["psa"]["mean"],
    )
    return summary


#########
# Parsing
#########


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for data generation and evaluation")
    common.add_argument("--out", type=Path, help="output directory (dataset root for gen-data)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="voxel-layout", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="generate the procedural scene corpus")

    train = commands.add_parser("train", parents=[common], help="train a flow-matching stage")
    train.add_argument("--stage", required=True, choices=[Stage.BASE, Stage.TEACHER, Stage.EDIT])
    train.add_argument("--init", type=Path, help="base checkpoint (default: <out>/base.ckpt)")

    distill = commands.add_parser("distill", parents=[common], help="distill the teacher into a few-step student")
    distill.add_argument("--base", type=Path)
    distill.add_argument("--teacher", type=Path)
    distill.add_argument("--no-step-loss", action="store_true", help="drop the step-wise teacher guidance")
    distill.add_argument("--no-holistic-loss", action="store_true", help="drop the holistic teacher guidance")

    for name, help_text in (
        ("generate", "generate layouts from instructions"),
        ("complete", "complete partially furnished scenes"),
        ("edit", "remove objects from scenes"),
    ):
        command = commands.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--model", type=Path, required=True, help="teacher, edit or student checkpoint")
        command.add_argument("--split", type=Split, default=Split.TEST, choices=list(Split))
        command.add_argument("--limit", type=int, help="only the first N scenes of the split")
        command.add_argument("--ply", action="store_true", help="also export the final occupancy surface")
        if name == "generate":
            command.add_argument("--long", type=int, dest="long_objects", help="one long scene with N objects")
        if name == "complete":
            command.add_argument("--keep", type=int, default=1, help="ground-truth objects kept")
        if name == "edit":
            command.add_argument("--object", dest="object_id", help="object to remove (default: the last one)")

    evaluate_parser = commands.add_parser("eval", parents=[common], help="score layouts against the ground truth")
    evaluate_parser.add_argument("--layouts", type=Path, required=True)
    evaluate_parser.add_argument("--split", type=Split, default=Split.TEST, choices=list(Split))

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Configuration file plus environment plus command-line overrides."""
    config = RunConfig.load(args.config)
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides[cn.SEED] = args.seed
    if args.out is not None:
        overrides[cn.PATHS_DATA if args.command == "gen-data" else cn.PATHS_OUT] = str(args.out)
    if getattr(args, "no_step_loss", False):
        overrides[cn.DISTILL_STEP_LOSS] = False
    if getattr(args, "no_holistic_loss", False):
        overrides[cn.DISTILL_HOLISTIC_LOSS] = False
    return config.with_overrides(overrides) if overrides else config


def run(args: argparse.Namespace) -> None:
    """Dispatch a parsed command line."""
    config = resolve_config(args)
    _LOGGER.info("Resolved configuration:\n%s", config.dumps())

    if args.command == "gen-data":
        cmd_gen_data(config, args.jobs)
    elif args.command == "train":
        cmd_train(config, Stage(args.stage), args.init)
    elif args.command == "distill":
        cmd_distill(config, args.base, args.teacher)
    elif args.command == "generate":
        cmd_generate(
            config,
            args.model,
            split=args.split,
            limit=args.limit,
            ply=args.ply,
            long_objects=args.long_objects,
        )
    elif args.command == "complete":
        cmd_complete(config, args.model, args.keep, split=args.split, limit=args.limit, ply=args.ply)
    elif args.command == "edit":
        cmd_edit(config, args.model, args.object_id, split=args.split, limit=args.limit, ply=args.ply)
    elif args.command == "eval":
        cmd_eval(config, args.layouts, args.split, args.jobs)


def exit_code(err: BaseException) -> int:
    """Exit code of a failure; wrapped errors are classified by their cause."""
    cause: BaseException | None = err
    while cause is not None:
        if isinstance(cause, ConfigError):
            return EXIT_CONFIG
        if isinstance(cause, DataError):
            return EXIT_DATA
        if isinstance(cause, NumericalError):
            return EXIT_NUMERICAL
        cause = cause.__cause__
    return EXIT_FAILURE


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line and return the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except VoxelLayoutException as err:
        code = exit_code(err)
        _LOGGER.error("%s: %s", type(err).__name__, err)  # noqa: TRY400
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
