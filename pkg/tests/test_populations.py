import numpy as np
import pytest

from cot_repe.dump import DumpSource, dump_stimulus_set
from cot_repe.enum import StimulusKind
from cot_repe.exceptions import DumpMissingLayer, LayerOutOfRange, LayerSpecInvalid
from cot_repe.populations import capture_population, parse_layer_spec, resolve_layers
from cot_repe.stimuli import build_stimulus_set, bundled_stimuli
from cot_repe.tasks import generate_task


@pytest.mark.parametrize(
    ("spec", "expected"),
    [
        ("last:5", [8, 9, 10, 11, 12]),
        ("last(3)", [10, 11, 12]),
        ("LAST : 1", [12]),
        ("2,3,4-6", [2, 3, 4, 5, 6]),
        ("9, 2 , 2", [2, 9]),
        ("12", [12]),
    ],
)
def test_resolve_layers(spec, expected):
    assert resolve_layers(spec, depth=12).layers == expected


def test_parse_keeps_the_written_form():
    assert parse_layer_spec("last:4").last == 4
    assert parse_layer_spec("1-3,7").indices == [1, 2, 3, 7]


def test_explicit_index_list():
    selection = resolve_layers([3, 1], depth=3)
    assert list(selection) == [1, 3]
    assert len(selection) == 2


@pytest.mark.parametrize("spec", ["garbage", "last", "1,,2", "last:-1", "6-4", ""])
def test_invalid_layer_specs(spec):
    with pytest.raises(LayerSpecInvalid):
        resolve_layers(spec, depth=12)


@pytest.mark.parametrize("spec", ["last:13", "last:0", "0", "11-13"])
def test_layers_out_of_range(spec):
    with pytest.raises(LayerOutOfRange):
        resolve_layers(spec, depth=12)


@pytest.fixture(scope="module")
def stimulus_set():
    task = generate_task("coin-parity", 0, 6)
    return build_stimulus_set(task.items[:3], bundled_stimuli(StimulusKind.ZERO_SHOT), m=2, template_id="zero_shot")


def test_population_rows_are_pair_differences(runner, stimulus_set):
    population = capture_population(runner, stimulus_set, [2, 3])
    assert population.differences[3].shape == (6, 16)
    assert population.pair_ids == [pair.pair_id for pair in stimulus_set.pairs]
    assert population.stimulus_digest == stimulus_set.digest

    pair = stimulus_set.pairs[4]
    live = {
        text: runner.last_token_activations(text, [3])[3] for text in (pair.positive, pair.negative)
    }
    np.testing.assert_array_equal(population.differences[3][4], live[pair.positive] - live[pair.negative])


def test_population_does_not_depend_on_worker_count(runner, stimulus_set):
    serial = capture_population(runner, stimulus_set, [1, 2, 3], workers=1)
    pooled = capture_population(runner, stimulus_set, [1, 2, 3], workers=3)
    assert serial.digest == pooled.digest


def test_population_from_dump_matches_live(runner, stimulus_set):
    source = DumpSource(dump_stimulus_set(runner, stimulus_set, [2, 3]))
    from_dump = capture_population(source, stimulus_set, [2, 3])
    live = capture_population(runner, stimulus_set, [2, 3])
    assert from_dump.model_id == runner.model_id
    for k in (2, 3):
        np.testing.assert_allclose(from_dump.differences[k], live.differences[k], atol=1e-9)


def test_population_from_dump_missing_layer(runner, stimulus_set):
    source = DumpSource(dump_stimulus_set(runner, stimulus_set, [3]))
    with pytest.raises(DumpMissingLayer):
        capture_population(source, stimulus_set, [2, 3])


def test_swapping_the_prompts_negates_the_rows(runner, stimulus_set):
    swapped = stimulus_set.model_copy(
        update={"pairs": [pair.model_copy(update={"positive": pair.negative, "negative": pair.positive}) for pair in stimulus_set.pairs]}
    )
    population = capture_population(runner, stimulus_set, [2, 3])
    mirrored = capture_population(runner, swapped, [2, 3])
    for k in (2, 3):
        np.testing.assert_array_equal(mirrored.differences[k], -population.differences[k])


def test_identical_prompts_give_zero_rows(runner, stimulus_set):
    degenerate = stimulus_set.model_copy(
        update={"pairs": [pair.model_copy(update={"positive": pair.negative}) for pair in stimulus_set.pairs]}
    )
    population = capture_population(runner, degenerate, [1, 3])
    for k in (1, 3):
        assert not population.differences[k].any()
