import math

import numpy as np
import pytest
import torch

from voxel_layout.exceptions import EditError, OrderingError, RolloutError
from voxel_layout.latentcodec import DEFAULT_CODEC
from voxel_layout.metrics import yaw_error
from voxel_layout.registration import Placement
from voxel_layout.rollout import (
    ContextMode,
    ObjectQueue,
    OrderPolicy,
    RolloutResult,
    RolloutState,
    complete,
    edit_remove,
    generate,
    generate_diverse,
    make_entry,
    order_objects,
    placement_diversity,
)
from voxel_layout.scenes import CATALOG, gen_scene
from voxel_layout.utils import derive_seed
from voxel_layout.voxelgrid import OccupancyGrid

from .oracles import ScriptedSampler

OBJECTS = [("table_0", "table"), ("bed_0", "bed")]


def _queue(codec, objects=OBJECTS, **kwargs):
    return order_objects(objects, codec=codec, **kwargs)


def _states(spec, codec):
    return [codec.encode(spec.occupancy(count)) for count in range(len(spec) + 1)]


def test_bottom_up_order(exact_codec):
    queue = order_objects([("lamp_0", "lamp"), *OBJECTS], codec=exact_codec)

    assert queue.class_names() == ["bed", "table", "lamp"]
    assert queue[0].canonical.frame == "canonical"


def test_instruction_order(exact_codec):
    queue = _queue(exact_codec, policy=OrderPolicy.INSTRUCTION_ORDER, instruction="A table next to a bed")

    assert queue.class_names() == ["table", "bed"]


def test_ordering_errors(exact_codec):
    with pytest.raises(OrderingError, match="empty"):
        order_objects([], codec=exact_codec)
    with pytest.raises(OrderingError, match="piano"):
        order_objects([("piano_0", "piano")], codec=exact_codec)
    with pytest.raises(OrderingError, match="not mentioned"):
        _queue(exact_codec, policy=OrderPolicy.INSTRUCTION_ORDER, instruction="a bed")
    with pytest.raises(OrderingError, match="needs an instruction"):
        _queue(exact_codec, policy=OrderPolicy.INSTRUCTION_ORDER)


def test_generate_recovers_the_scripted_scene(two_object_scene, exact_codec, embedder):
    spec = two_object_scene
    states = _states(spec, exact_codec)
    sampler = ScriptedSampler(states[1:], evaluations=3)

    result = generate(
        sampler,
        RolloutState.empty(codec=exact_codec),
        _queue(exact_codec),
        embedder.embed(spec.instruction),
        seed=9,
        codec=exact_codec,
    )

    assert result.state.index == 2
    assert result.state.occupancy.same_cells(spec.occupancy())
    assert len(result.state.history) == 2
    assert result.evaluations == 6
    assert [seed for *_, seed in sampler.calls] == [derive_seed(9, 1), derive_seed(9, 2)]
    torch.testing.assert_close(sampler.calls[1][0].values, states[1].values)

    for region, obj in zip(result.step_regions, spec.objects, strict=True):
        assert region.to_grid().same_cells(spec.object_grid(obj))

    truth = spec.ground_truth()
    assert [p.object_id for p in result.placements] == ["bed_0", "table_0"]
    for placement in result.placements:
        expected = truth[placement.object_id]
        np.testing.assert_allclose(placement.translation, expected.translation, atol=0.08)
    assert yaw_error(result.placements[0].yaw, 0.0) < math.radians(20)


def _assert_recovers(placements, spec):
    truth = spec.ground_truth()
    orders = CATALOG.symmetry_orders()
    assert [p.object_id for p in placements] == [obj.object_id for obj in spec.objects]
    for placement in placements:
        expected = truth[placement.object_id]
        np.testing.assert_allclose(placement.translation, expected.translation, atol=0.5 / 16)
        assert placement.scale == pytest.approx(expected.scale, rel=0.01)
        assert yaw_error(placement.yaw, expected.yaw, orders[placement.class_name]) < math.radians(2)


@pytest.mark.parametrize("seed", range(3))
def test_generate_procedural_scene_with_the_default_codec(seed, embedder):
    spec = gen_scene(seed)
    queue = order_objects([(obj.object_id, obj.class_name) for obj in spec.objects], codec=DEFAULT_CODEC)
    sampler = ScriptedSampler(_states(spec, DEFAULT_CODEC)[1:])

    result = generate(sampler, RolloutState.empty(), queue, embedder.embed(spec.instruction), seed=seed)

    assert result.state.index == len(spec)
    assert result.state.occupancy.same_cells(spec.occupancy())
    for region, obj in zip(result.step_regions, spec.objects, strict=True):
        assert region.to_grid().same_cells(spec.object_grid(obj))
    _assert_recovers(result.placements, spec)


def test_teacher_forcing_uses_the_reference_context(two_object_scene, exact_codec, embedder):
    spec = two_object_scene
    states = _states(spec, exact_codec)
    # the first step overshoots by placing both objects at once
    sampler = ScriptedSampler([states[2], states[2]])
    reference = [spec.occupancy(count) for count in range(3)]

    result = generate(
        sampler,
        RolloutState.empty(codec=exact_codec),
        _queue(exact_codec),
        embedder.embed(spec.instruction),
        codec=exact_codec,
        mode=ContextMode.TEACHER_FORCING,
        reference=reference,
    )

    torch.testing.assert_close(sampler.calls[1][0].values, states[1].values)
    assert result.step_regions[1].to_grid().same_cells(spec.object_grid(spec.objects[1]))


def test_teacher_forcing_needs_every_reference(two_object_scene, exact_codec, embedder):
    with pytest.raises(ValueError, match="reference"):
        generate(
            ScriptedSampler([]),
            RolloutState.empty(codec=exact_codec),
            _queue(exact_codec),
            embedder.embed("a bed"),
            codec=exact_codec,
            mode=ContextMode.TEACHER_FORCING,
            reference=[two_object_scene.occupancy(0)],
        )


def test_empty_step_aborts_with_partial_results(two_object_scene, exact_codec, embedder):
    states = _states(two_object_scene, exact_codec)
    sampler = ScriptedSampler([states[1], states[1]])

    with pytest.raises(RolloutError) as err:
        generate(
            sampler,
            RolloutState.empty(codec=exact_codec),
            _queue(exact_codec),
            embedder.embed("a bed and a table"),
            codec=exact_codec,
        )

    assert err.value.index == 2
    assert [p.object_id for p in err.value.placements] == ["bed_0"]


def test_latent_shape_mismatch_is_a_rollout_error(exact_codec, embedder):
    queue = ObjectQueue((make_entry("bed_0", "bed", codec=DEFAULT_CODEC),))

    with pytest.raises(RolloutError) as err:
        generate(ScriptedSampler([]), RolloutState.empty(codec=exact_codec), queue, embedder.embed("a bed"))

    assert err.value.index == 1


def test_empty_queue(exact_codec, embedder):
    with pytest.raises(OrderingError):
        generate(ScriptedSampler([]), RolloutState.empty(codec=exact_codec), ObjectQueue(), embedder.embed("a bed"))
    with pytest.raises(OrderingError, match="Nothing left"):
        complete(ScriptedSampler([]), OccupancyGrid.empty(16), ObjectQueue(), embedder.embed("a bed"))


def test_complete_places_the_remaining_object(two_object_scene, exact_codec, embedder):
    spec = two_object_scene
    states = _states(spec, exact_codec)
    queue = _queue(exact_codec, objects=[("table_0", "table")])

    result = complete(
        ScriptedSampler([states[2]]),
        spec.occupancy(1),
        queue,
        embedder.embed(spec.instruction),
        codec=exact_codec,
    )

    assert [p.object_id for p in result.placements] == ["table_0"]
    np.testing.assert_allclose(result.placements[0].translation, (0.72, 0.7, 0.16), atol=0.08)
    assert result.state.occupancy.same_cells(spec.occupancy())


def test_edit_remove(two_object_scene, exact_codec, embedder):
    spec = two_object_scene
    table = spec.objects[1]
    sampler = ScriptedSampler([exact_codec.encode(spec.occupancy(1))], evaluations=4)

    edited = edit_remove(
        sampler,
        spec.occupancy(),
        spec.object_grid(table),
        make_entry(table.object_id, table.class_name, codec=exact_codec),
        embedder.embed("remove the table"),
        codec=exact_codec,
    )

    assert edited.removed.to_grid().same_cells(spec.object_grid(table))
    assert edited.occupancy.same_cells(spec.occupancy(1))
    assert edited.evaluations == 4


def test_edit_remove_requires_overlap(two_object_scene, exact_codec, embedder):
    entry = make_entry("table_0", "table", codec=exact_codec)

    with pytest.raises(EditError, match="table_0"):
        edit_remove(
            ScriptedSampler([]),
            two_object_scene.occupancy(1),
            OccupancyGrid.empty(16),
            entry,
            embedder.embed("remove the table"),
            codec=exact_codec,
        )


def test_generate_diverse_uses_consecutive_seeds(two_object_scene, exact_codec, embedder):
    states = _states(two_object_scene, exact_codec)
    queue = _queue(exact_codec, objects=[("bed_0", "bed")])
    sampler = ScriptedSampler([states[1]] * 3)

    results = generate_diverse(
        sampler,
        RolloutState.empty(codec=exact_codec),
        queue,
        embedder.embed("a bed"),
        3,
        seed=5,
        codec=exact_codec,
    )

    assert [result.seed for result in results] == [5, 6, 7]
    assert placement_diversity(results) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError, match="at least 1"):
        generate_diverse(sampler, RolloutState.empty(codec=exact_codec), queue, embedder.embed("a bed"), 0)


def test_placement_diversity():
    state = RolloutState.empty()

    def result(x):
        return RolloutResult(state, [Placement("a", "bed", (x, 0.5, 0.1), 0.0, 0.4)])

    assert placement_diversity([result(0.2), result(0.3)]) == pytest.approx(0.1)
    assert placement_diversity([result(0.2)]) == 0.0
